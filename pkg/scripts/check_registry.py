#!/usr/bin/env python3
import os
import sys
import argparse
import logging

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from database.db import engine
from services.registry_service import init_registry, list_runs
from sqlalchemy import text

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def check_registry_connection():
    """Check the registry connection and that the run tables exist"""
    try:
        with engine.connect() as conn:
            result = conn.execute(text("SELECT 1"))
            if result.fetchone()[0] == 1:
                logger.info("Registry connection successful!")

            init_registry()
            for table in ("experiment_runs", "run_metrics"):
                try:
                    count = conn.execute(text(f"SELECT COUNT(*) FROM {table}")).fetchone()[0]
                    logger.info(f"Found {count} records in {table}")
                except Exception as e:
                    logger.error(f"Error checking {table} table: {str(e)}")
    except Exception as e:
        logger.error(f"Registry connection failed: {str(e)}")
        return False

    return True


def show_recent_runs(limit: int, command: str = None):
    runs = list_runs(limit=limit, command=command)
    if not runs:
        logger.info("No runs recorded yet")
        return
    for run in runs:
        headline = ", ".join(f"{k}={v:.4g}" for k, v in sorted(run.metrics.items())[:4])
        logger.info(f"#{run.id} {run.command} seed={run.seed} status={run.status.value} "
                    f"exit={run.exit_code} config={(run.config_hash or '')[:12]} {headline}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Check the run registry and list recent runs")
    parser.add_argument("--limit", type=int, default=10)
    parser.add_argument("--command", help="only runs of this subcommand")
    args = parser.parse_args()

    logger.info(f"Checking run registry (SDFLOW_DATABASE_URL is {'set' if os.getenv('SDFLOW_DATABASE_URL') else 'not set'})")
    if check_registry_connection():
        show_recent_runs(args.limit, args.command)
    else:
        sys.exit(1)
