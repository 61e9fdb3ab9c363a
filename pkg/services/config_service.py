import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, Mapping, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from models.errors import ConfigurationError
from models.schemas import ExperimentConfig
from services.checkpoint_service import format_value

# Set up logger
logger = logging.getLogger(__name__)

load_dotenv()

PACKAGE_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SOURCE_PACKAGES = ("app", "models", "services", "database")
RESOLVED_FILE = "config.resolved"
MANIFEST_FILE = "manifest.json"

# Environment fallbacks, applied below any config file.
ENV_KEYS = {
    "SDFLOW_THREADS": "threads",
    "SDFLOW_OUT": "out",
}


def log_level() -> str:
    return os.getenv("SDFLOW_LOG_LEVEL", "INFO").upper()


def _flatten(values: Mapping[str, Any], prefix: str = "") -> Dict[str, str]:
    flat = {}
    for key, value in values.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = format_value(value)
    return flat


def default_values() -> Dict[str, str]:
    return _flatten(ExperimentConfig().model_dump())


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            logger.error(f"Malformed line {number} in {source}: {raw!r}")
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read(), path)
    except OSError as e:
        logger.error(f"Failed to read config file {path}: {str(e)}")
        raise ConfigurationError(f"cannot read config file {path}: {str(e)}")


def parse_overrides(items: Optional[Iterable[str]]) -> Dict[str, str]:
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _nest(flat: Mapping[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = None if value == "none" else value
    return nested


@dataclass
class ResolvedConfig:
    config: ExperimentConfig
    values: Dict[str, str]
    sources: Dict[str, str] = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.values)


def resolve_config(config_path: Optional[str] = None, overrides: Optional[Iterable[str]] = None,
                   cli: Optional[Mapping[str, Any]] = None) -> ResolvedConfig:
    """Merge defaults, environment, config file, ``--set`` overrides and CLI flags, lowest first."""
    values = default_values()
    sources = {key: "default" for key in values}

    def _apply(layer: Mapping[str, Any], source: str):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in values:
                logger.error(f"Unknown config key {key!r} from {source}")
                raise ConfigurationError(f"unknown config key {key!r} (from {source})")
            values[key] = format_value(value)
            sources[key] = source

    _apply({key: os.getenv(env) for env, key in ENV_KEYS.items()}, "env")
    if config_path:
        _apply(read_config_file(config_path), f"file:{config_path}")
    _apply(parse_overrides(overrides), "set")
    _apply(dict(cli or {}), "cli")

    # The tokenizer's window shape follows the dataset unless set explicitly.
    for name in ("seq_len", "features"):
        data_key, vq_key = f"data.{name}", f"vq.{name}"
        if sources[vq_key] == "default":
            values[vq_key] = values[data_key]
            sources[vq_key] = sources[data_key]
        elif sources[data_key] != "default" and values[vq_key] != values[data_key]:
            raise ConfigurationError(f"{vq_key}={values[vq_key]} conflicts with {data_key}={values[data_key]}")

    try:
        config = ExperimentConfig(**_nest(values))
    except ValidationError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        raise ConfigurationError(f"invalid configuration: {str(e)}")
    # Re-flatten so the record reflects the values pydantic coerced.
    values = _flatten(config.model_dump())
    for key in sorted(values):
        logger.debug(f"config {key} = {values[key]} ({sources.get(key, 'default')})")
    changed = {k: v for k, v in sources.items() if v != "default"}
    logger.info(f"Resolved configuration ({len(changed)} keys set): {changed}")
    return ResolvedConfig(config=config, values=values, sources=sources)


def config_hash(values: Mapping[str, str]) -> str:
    text = "".join(f"{key}={values[key]}\n" for key in sorted(values))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def code_version() -> str:
    """Content hash of the package sources, stable across checkouts of the same code."""
    digest = hashlib.sha256()
    for package in SOURCE_PACKAGES:
        root = os.path.join(PACKAGE_ROOT, package)
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for name in sorted(filenames):
                if not name.endswith(".py"):
                    continue
                path = os.path.join(dirpath, name)
                digest.update(os.path.relpath(path, PACKAGE_ROOT).encode("utf-8"))
                with open(path, "rb") as f:
                    digest.update(f.read())
    return digest.hexdigest()[:12]


def write_resolved(out_dir: str, resolved: ResolvedConfig) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_FILE)
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(resolved.values):
            f.write(f"{key} = {resolved.values[key]}\n")
    return path


def write_manifest(out_dir: str, command: str, resolved: ResolvedConfig,
                   extra: Optional[Mapping[str, Any]] = None) -> str:
    """Record the run before any work starts; ``update_manifest`` adds the outcome."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "seed": resolved.config.seed,
        "config_hash": resolved.hash,
        "code_version": code_version(),
        "started_at": datetime.now(timezone.utc).isoformat(),
        "config": resolved.values,
        "sources": resolved.sources,
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Wrote run manifest {path} (config {manifest['config_hash'][:12]}, code {manifest['code_version']})")
    return path


def update_manifest(out_dir: str, **fields) -> Dict[str, Any]:
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    manifest.update(fields)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return manifest


def read_manifest(out_dir: str) -> Dict[str, Any]:
    with open(os.path.join(out_dir, MANIFEST_FILE), "r", encoding="utf-8") as f:
        return json.load(f)
