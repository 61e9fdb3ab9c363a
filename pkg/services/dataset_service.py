import logging
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import ConfigurationError, DataError, DimensionError
from models.schemas import DatasetConfig, SplitTag

# Set up logger
logger = logging.getLogger(__name__)

SINE_FREQ_RANGE = (0.01, 0.15)


@dataclass
class WindowedDataset:
    windows: np.ndarray
    feature_min: np.ndarray
    feature_max: np.ndarray
    split: np.ndarray
    source: str = ""
    columns: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.windows.shape[0]

    @property
    def seq_len(self) -> int:
        return self.windows.shape[1]

    @property
    def features(self) -> int:
        return self.windows.shape[2]

    def train(self) -> np.ndarray:
        return self.windows[self.split == SplitTag.TRAIN.value]

    def heldout(self) -> np.ndarray:
        return self.windows[self.split == SplitTag.HELDOUT.value]

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == SplitTag.TRAIN.value)

    def heldout_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == SplitTag.HELDOUT.value)

    def denormalize(self, windows: np.ndarray) -> np.ndarray:
        span = self.feature_max - self.feature_min
        return np.asarray(windows) * span + self.feature_min


def sine_values(t: np.ndarray, freq: float, phase: float) -> np.ndarray:
    return (np.sin(2.0 * np.pi * freq * np.asarray(t) + phase) + 1.0) / 2.0


def gen_sines(n: int, seq_len: int, features: int = 5, seed: int = 0, debug: bool = False) -> WindowedDataset:
    """Sines with random frequency and phase per window and feature, in [0, 1].

    Debug mode fixes f = 1/seq_len and phase 0 so every window spans one period.
    """
    if n < 1 or seq_len < 1 or features < 1:
        raise ConfigurationError(f"gen_sines needs positive sizes, got n={n} seq_len={seq_len} features={features}")
    rng = np.random.default_rng(seed)
    t = np.arange(seq_len, dtype=np.float64)
    if debug:
        freq = np.full((n, features), 1.0 / seq_len)
        phase = np.zeros((n, features))
    else:
        freq = rng.uniform(*SINE_FREQ_RANGE, size=(n, features))
        phase = rng.uniform(-np.pi, np.pi, size=(n, features))
    values = sine_values(t[None, :, None], freq[:, None, :], phase[:, None, :])
    logger.info(f"Generated {n} sine windows (seq_len={seq_len}, features={features}, debug={debug})")
    return WindowedDataset(
        windows=values.astype(np.float32),
        feature_min=np.zeros(features),
        feature_max=np.ones(features),
        split=np.full(n, SplitTag.TRAIN.value, dtype=object),
        source=f"sines(n={n},seq_len={seq_len},features={features},seed={seed},debug={debug})",
        columns=[f"f{j}" for j in range(features)],
    )


def split(dataset: WindowedDataset, heldout_fraction: float, seed: int) -> WindowedDataset:
    """Uniformly random window-level train/heldout split."""
    if not 0.0 < heldout_fraction < 1.0:
        raise ConfigurationError(f"heldout fraction must lie in (0, 1), got {heldout_fraction}")
    n = dataset.n
    n_held = int(round(n * heldout_fraction))
    if n_held == 0 or n_held == n:
        logger.error(f"Split of {n} windows at fraction {heldout_fraction} leaves an empty side")
        raise ConfigurationError(f"fraction {heldout_fraction} of {n} windows gives an empty split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    tags = np.full(n, SplitTag.TRAIN.value, dtype=object)
    tags[perm[:n_held]] = SplitTag.HELDOUT.value
    return replace(dataset, split=tags)


def _normalize(windows: np.ndarray, feature_min: np.ndarray, feature_max: np.ndarray, columns: List[str]) -> np.ndarray:
    span = feature_max - feature_min
    zero = span <= 0
    for j in np.flatnonzero(zero):
        logger.warning(f"Feature {columns[j] if j < len(columns) else j} has zero range; normalizing to 0")
    safe = np.where(zero, 1.0, span)
    out = (windows - feature_min) / safe
    out[..., zero] = 0.0
    outside = int(((out < 0) | (out > 1)).sum())
    if outside:
        logger.debug(f"Clipping {outside} values outside the train range")
    return np.clip(out, 0.0, 1.0)


def load_csv_windows(path: str, seq_len: int, stride: int = 1, seed: int = 0,
                     heldout_fraction: float = 0.0) -> WindowedDataset:
    """Sliding windows over a header-plus-numeric-rows CSV, min-max scaled with train-split statistics."""
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.error(f"Failed to read CSV {path}: {str(e)}")
        raise DataError(f"cannot read CSV {path}: {str(e)}")
    columns = list(frame.columns)
    if not columns:
        raise DataError(f"CSV {path} has no columns")
    values = np.empty(frame.shape, dtype=np.float64)
    for j, col in enumerate(columns):
        parsed = pd.to_numeric(frame[col].str.strip(), errors="coerce")
        bad = np.flatnonzero(parsed.isna().to_numpy() | ~np.isfinite(parsed.to_numpy(dtype=np.float64, na_value=np.nan)))
        if bad.size:
            row = int(bad[0])
            # +2: one for the header, one for 1-based line numbers.
            logger.error(f"Non-numeric cell in {path} at line {row + 2}, column {col!r}: {frame[col].iloc[row]!r}")
            raise DataError(f"non-numeric value {frame[col].iloc[row]!r} at row {row + 2}, column {col!r}")
        values[:, j] = parsed.to_numpy(dtype=np.float64)
    rows = values.shape[0]
    if rows < seq_len:
        raise DataError(f"CSV {path} has {rows} rows, fewer than the window length {seq_len}")

    windows = sliding_window_view(values, seq_len, axis=0)[::stride].transpose(0, 2, 1)
    n = windows.shape[0]
    dataset = WindowedDataset(
        windows=np.ascontiguousarray(windows),
        feature_min=np.zeros(len(columns)),
        feature_max=np.ones(len(columns)),
        split=np.full(n, SplitTag.TRAIN.value, dtype=object),
        source=os.path.abspath(path),
        columns=columns,
    )
    if heldout_fraction > 0:
        dataset = split(dataset, heldout_fraction, seed)
    train = dataset.train()
    feature_min = train.min(axis=(0, 1))
    feature_max = train.max(axis=(0, 1))
    dataset.windows = _normalize(dataset.windows, feature_min, feature_max, columns).astype(np.float32)
    dataset.feature_min = feature_min
    dataset.feature_max = feature_max
    logger.info(f"Loaded {n} windows of length {seq_len} from {path} ({len(columns)} features, stride {stride})")
    return dataset


def load_dataset(config: DatasetConfig, seed: int) -> WindowedDataset:
    if config.source == "sines":
        dataset = gen_sines(config.n_windows, config.seq_len, config.features, seed, debug=config.debug)
        if config.heldout_fraction > 0:
            dataset = split(dataset, config.heldout_fraction, seed)
        return dataset
    return load_csv_windows(config.source, config.seq_len, config.stride, seed, config.heldout_fraction)


def write_windows_csv(path: str, windows: np.ndarray, columns: Optional[List[str]] = None) -> str:
    windows = np.asarray(windows)
    if windows.ndim != 3:
        raise DimensionError(f"windows must be (n, seq_len, features), got {windows.shape}")
    n, seq_len, features = windows.shape
    columns = columns or [f"f{j}" for j in range(features)]
    frame = pd.DataFrame(windows.reshape(n * seq_len, features), columns=columns)
    frame.insert(0, "window_id", np.repeat(np.arange(n), seq_len))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.8g")
    logger.info(f"Wrote {n} windows to {path}")
    return path


def read_windows_csv(path: str) -> np.ndarray:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read windows CSV {path}: {str(e)}")
    if "window_id" not in frame.columns:
        raise DataError(f"windows CSV {path} has no window_id column")
    values = frame.drop(columns=["window_id"]).apply(pd.to_numeric, errors="coerce")
    if values.isna().any().any():
        raise DataError(f"windows CSV {path} contains non-numeric cells")
    groups = [g.to_numpy(dtype=np.float32) for _, g in values.groupby(frame["window_id"], sort=False)]
    lengths = {len(g) for g in groups}
    if len(lengths) != 1:
        raise DataError(f"windows in {path} have unequal lengths {sorted(lengths)}")
    return np.stack(groups)


def read_history_csv(path: str, seq_len: int, features: int) -> np.ndarray:
    """Forecast input: windows of the first half (seq_len // 2 rows each)."""
    history = read_windows_csv(path)
    half = seq_len // 2
    if history.shape[1:] != (half, features):
        raise DimensionError(f"history windows must be ({half}, {features}), got {history.shape[1:]}")
    return history
