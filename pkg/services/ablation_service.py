import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from models.errors import ConfigurationError
from models.schemas import (
    AblationAxis,
    AblationRow,
    ExperimentConfig,
    FlowObjective,
    GenerationMode,
    PriorFamily,
    ScaffoldBasis,
)
from services.metrics_service import discriminative_score, heldout_latent_flow_protocol, latent_frechet_distance
from services.pipeline_service import SDFlowPipeline, train_pipeline
from services.tokenizer_service import VQTokenizer

# Set up logger
logger = logging.getLogger(__name__)

KDE_ONLY_SETTING = "kde_only"

# A setting turns a trained pipeline into (pipeline, sampler kwargs).
Variant = Tuple[str, Dict[str, object], Callable[[SDFlowPipeline], Tuple[SDFlowPipeline, Dict[str, object]]]]


def _identity(pipeline: SDFlowPipeline):
    return pipeline, {}


def _variants(axis: AblationAxis, config: ExperimentConfig) -> List[Variant]:
    """(label, training overrides, sampling transform) per setting of ``axis``."""
    scaffold = config.scaffold
    if axis == AblationAxis.PRIOR:
        variants = [(family.value, {"scaffold": {"prior": family}}, _identity) for family in PriorFamily]
        variants.append((KDE_ONLY_SETTING, {"scaffold": {"prior": PriorFamily.ANCHOR}},
                         lambda p: (p, {"mode": GenerationMode.KDE_ONLY})))
        return variants
    if axis == AblationAxis.RANK:
        variants = [(f"r={r}", {"scaffold": {"rank": r}}, _identity) for r in config.ablate.ranks]
        variants.append((f"svd r={scaffold.rank}", {"scaffold": {"basis": ScaffoldBasis.SVD}}, _identity))
        return variants
    if axis == AblationAxis.BANDWIDTH:
        return [(f"h={h}", {}, (lambda h: lambda p: (p.with_bandwidth(h), {}))(h)) for h in config.ablate.bandwidths]
    if axis == AblationAxis.STEPS:
        return [(f"S={s}", {}, (lambda s: lambda p: (p, {"steps": s}))(s)) for s in config.ablate.steps]
    if axis == AblationAxis.OBJECTIVE:
        return [(obj.value, {"flow": {"objective": obj}}, _identity) for obj in FlowObjective]
    raise ConfigurationError(f"axis {axis} has no pipeline variants")


def _overridden(config: ExperimentConfig, overrides: Dict[str, Dict[str, object]]):
    scaffold = config.scaffold.model_copy(update=overrides.get("scaffold", {}))
    flow = config.flow.model_copy(update=overrides.get("flow", {}))
    return flow, scaffold


def _key(overrides: Dict[str, Dict[str, object]]) -> str:
    return repr(sorted((section, sorted((k, str(v)) for k, v in values.items()))
                       for section, values in overrides.items()))


def _summarize(axis: AblationAxis, setting: str, ds: List[float], lfd: List[float]) -> AblationRow:
    return AblationRow(axis=axis, setting=setting, ds_mean=float(np.mean(ds)), ds_std=float(np.std(ds)),
                       lfd_mean=float(np.mean(lfd)), lfd_std=float(np.std(lfd)), n_seeds=len(ds))


def run_ablation(axis: AblationAxis, tokenizer: VQTokenizer, windows: np.ndarray, config: ExperimentConfig,
                 steps: Optional[int] = None, threads: int = 1) -> List[AblationRow]:
    """One row per setting, mean and std of DS and LFD over ``config.ablate.seeds`` seeds.

    Settings that only change sampling reuse one trained pipeline per seed.
    """
    axis = AblationAxis(axis)
    windows = np.asarray(windows, dtype=np.float32)
    seeds = [config.seed + i for i in range(config.ablate.seeds)]

    if axis == AblationAxis.HELDOUT_FRACTION:
        per_fraction: Dict[float, Tuple[List[float], List[float]]] = {}
        for seed in seeds:
            reports = heldout_latent_flow_protocol(tokenizer, windows, config.ablate.fractions, seed, config.flow,
                                                   config.scaffold, config.metrics, steps=steps, threads=threads)
            for report in reports:
                ds, lfd = per_fraction.setdefault(report.fraction, ([], []))
                ds.append(report.ds)
                lfd.append(report.lfd)
        return [_summarize(axis, f"fraction={f}", *per_fraction[f]) for f in config.ablate.fractions]

    rows = []
    trained: Dict[Tuple[str, int], SDFlowPipeline] = {}
    for label, overrides, transform in _variants(axis, config):
        ds_values, lfd_values = [], []
        for seed in seeds:
            cache_key = (_key(overrides), seed)
            if cache_key not in trained:
                flow_config, scaffold_config = _overridden(config, overrides)
                trained[cache_key], _ = train_pipeline(tokenizer, windows, flow_config, scaffold_config, seed,
                                                       steps=steps)
            pipeline, sample_kwargs = transform(trained[cache_key])
            generated = pipeline.generate(len(windows), seed=seed, threads=threads, **sample_kwargs).series
            ds_values.append(discriminative_score(windows, generated, seed, config.metrics))
            lfd_values.append(latent_frechet_distance(windows, generated, tokenizer))
        row = _summarize(axis, label, ds_values, lfd_values)
        logger.info(f"Ablation {axis.value} {label}: DS={row.ds_mean:.4f}+/-{row.ds_std:.4f} "
                    f"LFD={row.lfd_mean:.4f}+/-{row.lfd_std:.4f}")
        rows.append(row)
    return rows


def write_ablation_csv(rows: List[AblationRow], path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame([row.model_dump(mode="json") for row in rows],
                         columns=["axis", "setting", "ds_mean", "ds_std", "lfd_mean", "lfd_std", "n_seeds"])
    frame.to_csv(path, index=False, float_format="%.6f")
    logger.info(f"Wrote {len(rows)} ablation rows to {path}")
    return path
