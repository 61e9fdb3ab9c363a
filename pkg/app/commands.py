"""Command handlers. Each one loads inputs, delegates to the services and writes its outputs."""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from models.errors import ConfigurationError, DataError
from models.schemas import (
    AblationAxis,
    AnalysisKind,
    CommandResult,
    ExperimentConfig,
    GenerationMode,
    SplitTag,
)
from services import figures_service
from services.ablation_service import run_ablation, write_ablation_csv
from services.config_service import ResolvedConfig, code_version
from services.dataset_service import (
    WindowedDataset,
    load_csv_windows,
    load_dataset,
    read_history_csv,
    read_windows_csv,
    write_windows_csv,
)
from services.flow_service import interval_coverage
from services.geometry_service import (
    compression_ratio,
    dimension_independence,
    kde_rate_experiment,
    pinsker_check,
    random_bound_instances,
    scaled_gaussian_sampler,
    semi_orthogonal,
    spectrum_along_flow,
    transport_anchored,
    transport_gaussian,
    unit_sphere_sampler,
    velocity_bound_check,
    zero_sampler,
)
from services.metrics_service import evaluate_generated, render_report
from services.pipeline_service import SDFlowPipeline, train_pipeline
from services.tokenizer_service import VQTokenizer, codebook_utilization, train_vqvae

# Set up logger
logger = logging.getLogger(__name__)

STAGE1_FILE = "stage1.ckpt"
STAGE2_FILE = "stage2.ckpt"

# Transport settings checked by the Gaussian branch: (D, C).
GAUSSIAN_TRANSPORT_CASES = ((256, 0.0), (512, 1.0))


@dataclass
class CommandContext:
    resolved: ResolvedConfig
    args: Any
    plot: bool = False
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> ExperimentConfig:
        return self.resolved.config

    @property
    def out(self) -> str:
        return self.config.out

    @property
    def seed(self) -> int:
        return self.config.seed

    def explicit(self, key: str) -> bool:
        return self.resolved.sources.get(key, "default") != "default"

    def path(self, name: str) -> str:
        os.makedirs(self.out, exist_ok=True)
        return os.path.join(self.out, name)


def _write_json(path: str, payload: Any) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
    return path


def _write_frame(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False, float_format="%.8g")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def _require(path: Optional[str], flag: str) -> str:
    if not path:
        raise ConfigurationError(f"{flag} is required for this command")
    if not os.path.exists(path):
        raise DataError(f"{flag} file {path} does not exist")
    return path


def _dataset(ctx: CommandContext) -> WindowedDataset:
    return load_dataset(ctx.config.data, ctx.seed)


def _check_tokenizer(ctx: CommandContext, tokenizer: VQTokenizer, windows: Optional[np.ndarray] = None):
    """Hard error when the Stage-1 tokenizer disagrees with explicit settings or the data shape."""
    cfg = tokenizer.config
    for name in ("codebook_size", "code_dim", "seq_len", "features", "downsample"):
        key = f"vq.{name}"
        if ctx.explicit(key) and getattr(ctx.config.vq, name) != getattr(cfg, name):
            logger.error(f"Tokenizer {name}={getattr(cfg, name)} but {key}={getattr(ctx.config.vq, name)}")
            raise ConfigurationError(f"tokenizer {name}={getattr(cfg, name)} conflicts with {key}={getattr(ctx.config.vq, name)}")
    if windows is not None and windows.shape[1:] != (cfg.seq_len, cfg.features):
        raise ConfigurationError(f"windows {windows.shape[1:]} do not match tokenizer ({cfg.seq_len}, {cfg.features})")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def cmd_train_vqvae(ctx: CommandContext) -> CommandResult:
    dataset = _dataset(ctx)
    train = dataset.train()
    tokenizer, logs = train_vqvae(train, ctx.config.vq, ctx.seed)
    ckpt = ctx.path(STAGE1_FILE)
    digest = tokenizer.save(ckpt, extra_config={"run.seed": ctx.seed, "data.source": dataset.source})
    log_path = _write_frame(pd.DataFrame([log.model_dump() for log in logs]), ctx.path("vq_train_log.csv"))

    final = logs[-1]
    metrics = {"recon_mse": final.recon_mse, "utilization": codebook_utilization(tokenizer, train),
               "loss": final.loss}
    if len(dataset.heldout()):
        recon, _ = tokenizer.reconstruct(dataset.heldout())
        metrics["heldout_recon_mse"] = float(((recon - dataset.heldout()) ** 2).mean())
    epochs = [log.epoch for log in logs]
    checks = {
        "finite_losses": bool(all(np.isfinite([log.loss for log in logs]))),
        "epoch_index_monotone": epochs == list(range(1, len(logs) + 1)),
    }
    return CommandResult(command="train-vqvae", checks=checks, metrics=metrics,
                         outputs={"checkpoint": ckpt, "checkpoint_sha256": digest, "log": log_path})


def cmd_train_flow(ctx: CommandContext) -> CommandResult:
    tokenizer = VQTokenizer.load(_require(ctx.args.stage1, "--stage1"))
    dataset = _dataset(ctx)
    windows = dataset.train()
    _check_tokenizer(ctx, tokenizer, windows)
    fraction = ctx.config.scaffold.anchor_fraction
    if fraction < 1.0:
        keep = int(round(fraction * len(windows)))
        windows = windows[np.random.default_rng(ctx.seed).permutation(len(windows))[:keep]]
        logger.info(f"Training Stage 2 on {keep} of {len(dataset.train())} windows (fraction {fraction})")

    pipeline, history = train_pipeline(tokenizer, windows, ctx.config.flow, ctx.config.scaffold, ctx.seed)
    ckpt = ctx.path(STAGE2_FILE)
    digest = pipeline.save(ckpt, extra_config={"run.seed": ctx.seed, "data.source": dataset.source})
    frame = pd.DataFrame([h.model_dump(mode="json") for h in history])
    log_path = _write_frame(frame, ctx.path("flow_train_log.csv"))

    stats = pipeline.prior.coordinate_stats()
    metrics = {"loss": history[-1].total, "main_loss": history[-1].main, "bandwidth": pipeline.prior.bandwidth,
               "mean_nn_distance": pipeline.prior.mean_nn_distance, "coord_mean_norm": stats["mean_norm"],
               "coord_std": stats["global_std"]}
    checks = {"finite_losses": bool(np.isfinite(frame["total"]).all())}
    return CommandResult(command="train-flow", checks=checks, metrics=metrics,
                         outputs={"checkpoint": ckpt, "checkpoint_sha256": digest, "log": log_path})


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _sampling_overrides(ctx: CommandContext):
    steps = ctx.config.flow.ode_steps if ctx.explicit("flow.ode_steps") else None
    tau = ctx.config.flow.tau_infer if ctx.explicit("flow.tau_infer") else None
    return steps, tau


def cmd_generate(ctx: CommandContext) -> CommandResult:
    pipeline = SDFlowPipeline.load(_require(ctx.args.stage2, "--stage2"))
    steps, tau = _sampling_overrides(ctx)
    mode = GenerationMode(ctx.args.mode)
    n = ctx.args.n
    result = pipeline.generate(n, steps=steps, tau=tau, seed=ctx.seed, mode=mode, threads=ctx.config.threads)
    cfg = pipeline.tokenizer.config
    path = write_windows_csv(ctx.path("generated.csv"), result.series)

    expected_steps = 0 if mode == GenerationMode.KDE_ONLY else (steps or pipeline.flow_config.ode_steps)
    checks = {
        "window_shape": result.series.shape == (n, cfg.seq_len, cfg.features),
        "step_counter": result.steps_taken == expected_steps,
    }
    return CommandResult(command="generate", checks=checks, metrics={"steps_taken": result.steps_taken},
                         outputs={"generated": path, "mode": mode.value, "n": str(n),
                                  "steps": str(expected_steps), "tau": str(tau or pipeline.flow_config.tau_infer)})


def cmd_forecast(ctx: CommandContext) -> CommandResult:
    pipeline = SDFlowPipeline.load(_require(ctx.args.stage2, "--stage2"))
    cfg = pipeline.tokenizer.config
    history = read_history_csv(_require(ctx.args.history, "--history"), cfg.seq_len, cfg.features)
    steps, tau = _sampling_overrides(ctx)
    result = pipeline.forecast(history, steps=steps, tau=tau, seed=ctx.seed, n_draws=ctx.args.draws)
    half = cfg.seq_len // 2
    outputs = {"forecast": write_windows_csv(ctx.path("forecast.csv"), result.series)}
    metrics: Dict[str, float] = {}
    if result.lower is not None:
        outputs["lower"] = write_windows_csv(ctx.path("forecast_lower.csv"), result.lower)
        outputs["upper"] = write_windows_csv(ctx.path("forecast_upper.csv"), result.upper)
        if ctx.args.truth:
            truth = read_windows_csv(ctx.args.truth)
            metrics["coverage"] = interval_coverage(truth[:, half:], result.lower[:, half:], result.upper[:, half:])
    if ctx.args.truth:
        truth = read_windows_csv(ctx.args.truth)
        metrics["mae"] = float(np.abs(truth[:, half:] - result.series[:, half:]).mean())
    checks = {"history_preserved": bool(np.array_equal(result.series[:, :half], history))}
    return CommandResult(command="forecast", checks=checks, metrics=metrics, outputs=outputs)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _load_real(ctx: CommandContext, seq_len: int) -> WindowedDataset:
    path = ctx.args.real
    if not path:
        return _dataset(ctx)
    header = pd.read_csv(_require(path, "--real"), nrows=0).columns
    if "window_id" in header:
        windows = read_windows_csv(path)
        return WindowedDataset(windows=windows, feature_min=np.zeros(windows.shape[2]),
                               feature_max=np.ones(windows.shape[2]),
                               split=np.full(len(windows), SplitTag.TRAIN.value, dtype=object), source=path)
    data = ctx.config.data
    return load_csv_windows(path, seq_len, data.stride, ctx.seed, data.heldout_fraction)


def cmd_evaluate(ctx: CommandContext) -> CommandResult:
    tokenizer = VQTokenizer.load(_require(ctx.args.checkpoint, "--checkpoint"))
    real = _load_real(ctx, tokenizer.config.seq_len)
    synthetic = read_windows_csv(_require(ctx.args.synthetic, "--synthetic"))
    _check_tokenizer(ctx, tokenizer, synthetic)
    train = real.train()
    heldout = real.heldout()
    report = evaluate_generated(train, synthetic, tokenizer, ctx.seed, ctx.config.metrics, train=train,
                                heldout=heldout if len(heldout) else None)
    report.config_hash = ctx.resolved.hash
    report.code_version = code_version()
    json_path = ctx.path("report.json")
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=2))
    text = render_report(report)
    text_path = ctx.path("report.txt")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")

    metrics = {"ds": report.ds, "lfd": report.lfd, "copy_rate": report.copy_rate}
    if report.ps is not None:
        metrics["ps"] = report.ps
    checks = {
        "ds_in_range": 0.0 <= report.ds <= 0.5,
        "lfd_nonnegative": report.lfd >= 0.0,
        "copy_rate_in_range": 0.0 <= report.copy_rate <= 1.0,
    }
    return CommandResult(command="evaluate", checks=checks, metrics=metrics,
                         outputs={"report": json_path, "text": text_path})


# ---------------------------------------------------------------------------
# Geometry analyses
# ---------------------------------------------------------------------------

def _analyze_spectrum(ctx: CommandContext, result: CommandResult):
    pipeline = SDFlowPipeline.load(_require(ctx.args.stage2, "--stage2"))
    acfg = ctx.config.analyze
    reports = spectrum_along_flow(pipeline, acfg.spectrum_samples, threshold=acfg.spectrum_threshold, seed=ctx.seed)
    rows = []
    for report in reports:
        for i, (s, c) in enumerate(zip(report.singular_values, report.cumulative_variance), start=1):
            rows.append({"label": report.label, "t": report.t, "index": i, "singular_value": s, "cumulative": c})
    result.outputs["spectrum"] = _write_frame(pd.DataFrame(rows), ctx.path("spectrum.csv"))
    at_zero = {r.label: r for r in reports if r.t == 0.0}
    ratio = compression_ratio(at_zero["gaussian"], at_zero["anchored"])
    result.metrics["compression_ratio_t0"] = ratio
    for report in reports:
        result.metrics[f"effective_rank_{report.label}_t{report.t:.2f}"] = report.effective_rank
    result.checks["cumulative_ends_at_one"] = all(
        abs(r.cumulative_variance[-1] - 1.0) < 1e-9 for r in reports if r.effective_rank > 0)
    summary = {"compression_ratio_t0": ratio, "reports": [r.model_dump() for r in reports]}
    result.outputs["spectrum_json"] = _write_json(ctx.path("spectrum.json"), summary)
    if ctx.plot:
        path = figures_service.spectrum_figure(reports, ctx.path("spectrum.html"))
        if path:
            result.outputs["spectrum_figure"] = path


def _analyze_transport(ctx: CommandContext, result: CommandResult):
    acfg = ctx.config.analyze
    rng = np.random.default_rng(ctx.seed)
    results = []
    for D, C in GAUSSIAN_TRANSPORT_CASES:
        if C == 0.0:
            sampler = zero_sampler(D)
        elif C == 1.0:
            sampler = unit_sphere_sampler(D)
        else:
            sampler = scaled_gaussian_sampler(D, C)
        results.append(transport_gaussian(D, sampler, acfg.transport_trials, rng, C=C))
    anchored = []
    for D in acfg.transport_dims:
        V = semi_orthogonal(D, acfg.transport_rank, rng)
        anchored.append(transport_anchored(V, acfg.transport_h, acfg.transport_epsilon, acfg.transport_trials, rng))
    results.extend(anchored)
    result.outputs["transport"] = _write_frame(pd.DataFrame([r.model_dump() for r in results]),
                                               ctx.path("transport.csv"))
    for r in results:
        result.checks[f"{r.branch}_D{r.D}"] = r.holds
    result.checks["anchored_dimension_independent"] = dimension_independence(anchored)
    result.outputs["transport_json"] = _write_json(ctx.path("transport.json"),
                                                   {"results": [r.model_dump() for r in results],
                                                    "checks": result.checks})


def _analyze_pinsker(ctx: CommandContext, result: CommandResult):
    acfg = ctx.config.analyze
    rng = np.random.default_rng(ctx.seed)
    checks = [pinsker_check(inst) for inst in random_bound_instances(acfg.pinsker_instances, rng)]
    frame = pd.DataFrame([c.model_dump() for c in checks])
    result.outputs["pinsker"] = _write_frame(frame, ctx.path("pinsker.csv"))
    velocity = velocity_bound_check(random_bound_instances(acfg.velocity_instances, rng))
    result.checks["pinsker_all_hold"] = bool(frame["holds"].all())
    result.checks["velocity_bound_holds"] = velocity.holds
    result.metrics["pinsker_fraction_holding"] = float(frame["holds"].mean())
    result.metrics["velocity_mse"] = velocity.lhs
    result.metrics["velocity_bound"] = velocity.rhs
    result.outputs["pinsker_json"] = _write_json(ctx.path("pinsker.json"),
                                                 {"instances": len(frame), "velocity": velocity.model_dump(),
                                                  "checks": result.checks})


def _analyze_kde_rate(ctx: CommandContext, result: CommandResult):
    acfg = ctx.config.analyze
    results = []
    for r in acfg.kde_ranks:
        grid = acfg.kde_grid_1d if r == 1 else acfg.kde_grid_2d
        results.append(kde_rate_experiment(r, replicates=acfg.kde_replicates, seed=ctx.seed + r,
                                           grid_points=grid, bandwidth_scale=acfg.kde_bandwidth_scale))
    rows = [{"r": res.r, "n": n, "mise": m} for res in results for n, m in zip(res.n_grid, res.mise)]
    result.outputs["kde_rate"] = _write_frame(pd.DataFrame(rows), ctx.path("kde_rate.csv"))
    for res in results:
        result.checks[f"kde_rate_r{res.r}"] = res.holds
        result.metrics[f"kde_slope_r{res.r}"] = res.slope
    result.outputs["kde_rate_json"] = _write_json(ctx.path("kde_rate.json"), [r.model_dump() for r in results])
    if ctx.plot:
        path = figures_service.kde_rate_figure(results, ctx.path("kde_rate.html"))
        if path:
            result.outputs["kde_rate_figure"] = path


ANALYSES = {
    AnalysisKind.SPECTRUM: _analyze_spectrum,
    AnalysisKind.TRANSPORT: _analyze_transport,
    AnalysisKind.PINSKER: _analyze_pinsker,
    AnalysisKind.KDE_RATE: _analyze_kde_rate,
}


def cmd_analyze(ctx: CommandContext) -> CommandResult:
    which = AnalysisKind(ctx.args.which)
    result = CommandResult(command="analyze", outputs={"which": which.value})
    ANALYSES[which](ctx, result)
    return result


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def cmd_ablate(ctx: CommandContext) -> CommandResult:
    axis = AblationAxis(ctx.args.axis)
    dataset = _dataset(ctx)
    windows = dataset.train()
    if ctx.args.stage1:
        tokenizer = VQTokenizer.load(_require(ctx.args.stage1, "--stage1"))
        _check_tokenizer(ctx, tokenizer, windows)
    else:
        tokenizer, _ = train_vqvae(windows, ctx.config.vq, ctx.seed)
    rows = run_ablation(axis, tokenizer, windows, ctx.config, threads=ctx.config.threads)
    path = write_ablation_csv(rows, ctx.path(f"ablation_{axis.value}.csv"))
    result = CommandResult(command="ablate", outputs={"ablation": path, "axis": axis.value})
    for row in rows:
        result.metrics[f"ds_mean[{row.setting}]"] = row.ds_mean
        result.metrics[f"lfd_mean[{row.setting}]"] = row.lfd_mean
    result.checks["ds_in_range"] = all(0.0 <= row.ds_mean <= 0.5 for row in rows)
    if ctx.plot:
        fig = figures_service.ablation_figure(rows, ctx.path(f"ablation_{axis.value}.html"))
        if fig:
            result.outputs["ablation_figure"] = fig
    return result


COMMANDS = {
    "train-vqvae": cmd_train_vqvae,
    "train-flow": cmd_train_flow,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "forecast": cmd_forecast,
    "ablate": cmd_ablate,
}
