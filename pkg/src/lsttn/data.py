"""Sensor series and graph ingestion, normalization, windowing and synthetic data."""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDataError,
    DegenerateMaskError,
    InsufficientDataError,
    LayoutError,
    ParseError,
    ValidationError,
)

STEPS_PER_DAY = 288
FIVE_MINUTES = np.timedelta64(5, "m")


@dataclass
class TrafficSeries:
    """Sensor matrix ``values[T, V]`` with timestamps and a validity mask.

    ``missing_mask`` is True where the value is valid (the name follows the
    original data description; a False entry marks a missing reading).
    """

    values: np.ndarray
    timestamps: np.ndarray
    missing_mask: np.ndarray
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        self.timestamps = np.asarray(self.timestamps)
        if self.values.ndim != 2:
            raise LayoutError(f"values must be 2-D [T, V], got shape {self.values.shape}")
        T, V = self.values.shape
        if T < 1 or V < 1:
            raise LayoutError(f"need T >= 1 and V >= 1, got T={T}, V={V}")
        if self.missing_mask.shape != self.values.shape:
            raise LayoutError("missing_mask shape differs from values shape")
        if self.timestamps.shape != (T,):
            raise LayoutError(f"expected {T} timestamps, got {self.timestamps.shape}")
        if T > 1:
            steps = np.diff(self.timestamps)
            if not (steps == steps[0]).all() or not steps[0] > steps[0] * 0:
                raise LayoutError("timestamps must be strictly increasing with constant spacing")
        if not np.isfinite(self.values[self.missing_mask]).all():
            raise ValidationError("non-finite value at a position marked valid")
        if not self.node_ids:
            self.node_ids = [str(v) for v in range(V)]
        if len(self.node_ids) != V:
            raise LayoutError(f"{len(self.node_ids)} node ids for {V} columns")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "TrafficSeries":
        return TrafficSeries(
            self.values[start:stop].copy(),
            self.timestamps[start:stop].copy(),
            self.missing_mask[start:stop].copy(),
            list(self.node_ids),
        )


@dataclass
class TrafficGraph:
    num_nodes: int
    adjacency: np.ndarray
    P_f: np.ndarray
    P_b: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "TrafficGraph":
        A = np.asarray(adjacency, dtype=np.float64)
        P_f, P_b = transition_matrices(A)
        return cls(A.shape[0], A, P_f, P_b)

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(self.adjacency))


@dataclass(frozen=True)
class DataLayout:
    """Window geometry in 5-minute steps: long window ``L``, subseries ``S``, forecast ``F``."""

    L: int = 4032
    S: int = 12
    F: int = 12
    steps_per_day: int = STEPS_PER_DAY

    def __post_init__(self):
        for name in ("L", "S", "F", "steps_per_day"):
            if getattr(self, name) < 1:
                raise LayoutError(f"{name} must be positive")
        if self.L % self.S:
            raise LayoutError(f"L={self.L} is not divisible by S={self.S}")
        if self.steps_per_day % self.S:
            raise LayoutError(f"steps_per_day={self.steps_per_day} is not divisible by S={self.S}")

    @property
    def n_sub(self) -> int:
        return self.L // self.S

    @property
    def l(self) -> int:
        """Subseries per day."""
        return self.steps_per_day // self.S

    @property
    def covers_week(self) -> bool:
        return 7 * self.l <= self.n_sub


@dataclass
class WindowSample:
    X_long: np.ndarray
    X_short: np.ndarray
    Y: np.ndarray
    origin: int
    y_missing: np.ndarray
    x_valid: np.ndarray


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": float(self.mean), "std": float(self.std)}


# ---------------------------------------------------------------------------
# loading


def _parse_timestamps(raw: list[str], path: Path) -> np.ndarray:
    if all(r.lstrip("-").isdigit() for r in raw):
        return np.array([int(r) for r in raw], dtype=np.int64)
    try:
        return np.array(raw, dtype="datetime64[s]")
    except ValueError as exc:
        raise ParseError(f"{path}: timestamp column is neither integer steps nor ISO-8601 ({exc})") from None


def _check_interval(ts: np.ndarray, path) -> None:
    if len(ts) < 2:
        return
    steps = np.diff(ts)
    if np.issubdtype(ts.dtype, np.datetime64):
        ok = (steps == FIVE_MINUTES).all()
    else:
        ok = (steps == steps[0]).all() and steps[0] > 0
    if not ok:
        bad = int(np.nonzero(steps != steps[0])[0][0]) if (steps != steps[0]).any() else 0
        raise LayoutError(f"{path}: non-uniform timestamps near row {bad + 2}")


def load_series(path, format: str | None = None) -> TrafficSeries:
    """Read a series file. Stored zeros and empty cells are treated as missing."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        format = "binary" if path.suffix == ".npz" else "csv"
    if format == "binary":
        with np.load(path, allow_pickle=False) as z:
            values = z["values"].astype(np.float64)
            ts = z["timestamps"]
            node_ids = [str(n) for n in z["node_ids"]]
        mask = np.isfinite(values) & (values != 0)
        values = np.where(mask, values, 0.0)
        _check_interval(ts, path)
        return TrafficSeries(values, ts, mask, node_ids)
    if format != "csv":
        raise ConfigError(f"unknown series format {format!r}")

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[0].strip() != "timestamp":
            raise ParseError(f"{path}: line 1: first column must be 'timestamp'")
        node_ids = [h.strip() for h in header[1:]]
        if not node_ids:
            raise ParseError(f"{path}: line 1: no node columns")
        n = len(node_ids)
        raw_ts, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise ParseError(f"{path}: line {lineno}: expected {n + 1} fields, got {len(row)}")
            raw_ts.append(row[0].strip())
            vals = []
            for col, cell in enumerate(row[1:]):
                cell = cell.strip()
                if not cell:
                    vals.append(0.0)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}: field {node_ids[col]!r}: cannot parse {cell!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    ts = _parse_timestamps(raw_ts, path)
    _check_interval(ts, path)
    mask = np.isfinite(values) & (values != 0)
    values = np.where(mask, values, 0.0)
    return TrafficSeries(values, ts, mask, node_ids)


def save_series(series: TrafficSeries, path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "binary" if path.suffix == ".npz" else "csv"
    values = np.where(series.missing_mask, series.values, 0.0)
    if format == "binary":
        with path.open("wb") as fh:
            np.savez(fh, values=values, timestamps=series.timestamps,
                     node_ids=np.array(series.node_ids))
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *series.node_ids])
        for t, row in zip(series.timestamps, values):
            w.writerow([str(t), *(repr(float(v)) if v != 0 else "0" for v in row)])


def load_graph(path, num_nodes: int) -> TrafficGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    A = np.zeros((num_nodes, num_nodes))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return TrafficGraph.from_adjacency(A)
        if [h.strip() for h in header] != ["from", "to", "weight"]:
            raise ParseError(f"{path}: line 1: header must be from,to,weight")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            try:
                i, j, w = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: cannot parse edge {row!r}") from None
            if not (0 <= i < num_nodes and 0 <= j < num_nodes):
                raise IndexError(f"{path}: line {lineno}: node id out of range [0, {num_nodes})")
            if not w >= 0 or not math.isfinite(w):
                raise ValidationError(f"{path}: line {lineno}: negative or non-finite weight {w}")
            A[i, j] = w
    return TrafficGraph.from_adjacency(A)


def save_graph(graph: TrafficGraph, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "weight"])
        for i, j in zip(*np.nonzero(graph.adjacency)):
            w.writerow([int(i), int(j), repr(float(graph.adjacency[i, j]))])


def _row_normalize(A: np.ndarray) -> np.ndarray:
    deg = A.sum(axis=1)
    P = np.zeros_like(A)
    nz = deg > 0
    P[nz] = A[nz] / deg[nz, None]
    # zero out-degree: self-transition keeps the row stochastic
    idx = np.nonzero(~nz)[0]
    P[idx, idx] = 1.0
    return P


def transition_matrices(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward random-walk transition matrices of ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise LayoutError(f"adjacency must be square, got {A.shape}")
    if (A < 0).any():
        raise ValidationError("adjacency has negative entries")
    return _row_normalize(A), _row_normalize(A.T)


# ---------------------------------------------------------------------------
# normalization and splitting


def fit_normalizer(train: TrafficSeries) -> Normalizer:
    valid = train.values[train.missing_mask]
    if valid.size == 0:
        raise DegenerateDataError("training slice has no valid entries")
    mean = float(valid.mean())
    std = float(valid.std())
    if not std > 0:
        raise DegenerateDataError("training data has zero variance")
    return Normalizer(mean, std)


def split_dataset(series: TrafficSeries, ratios=(0.7, 0.2, 0.1), min_length: int | None = None):
    """Chronological train/val/test slices. ``min_length`` is usually ``L + F``."""
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    T = series.num_steps
    n_train = int(round(T * ratios[0]))
    n_val = int(round(T * ratios[1]))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]
    slices = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        need = 1 if min_length is None else min_length
        if b - a < need:
            raise InsufficientDataError(f"{name} slice has {b - a} steps, need at least {need}")
        slices.append(series.slice(a, b))
    return tuple(slices)


# ---------------------------------------------------------------------------
# windows and subseries


class WindowSet(Sequence):
    """Lazy sequence of :class:`WindowSample` over one slice.

    Inputs are normalized with missing entries set to 0; targets stay in raw units.
    """

    def __init__(self, series: TrafficSeries, layout: DataLayout,
                 normalizer: Normalizer | None = None, stride: int = 1):
        if stride < 1:
            raise ValidationError("stride must be >= 1")
        T = series.num_steps
        if T < layout.L + layout.F:
            raise InsufficientDataError(f"slice has {T} steps, need at least {layout.L + layout.F}")
        self.series = series
        self.layout = layout
        self.normalizer = normalizer
        self.stride = stride
        self.origins = np.arange(layout.L, T - layout.F + 1, stride)
        x = series.values if normalizer is None else normalizer.apply(series.values)
        self.inputs = np.where(series.missing_mask, x, 0.0)
        self.targets = series.values
        self.valid = series.missing_mask

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        t = int(self.origins[i])
        L, S, F = self.layout.L, self.layout.S, self.layout.F
        X_long = self.inputs[t - L:t]
        return WindowSample(
            X_long=X_long,
            X_short=X_long[L - S:],
            Y=self.targets[t:t + F],
            origin=t,
            y_missing=~self.valid[t:t + F],
            x_valid=self.valid[t - L:t],
        )

    def batch(self, indices) -> dict[str, np.ndarray]:
        """Stacked arrays for several windows: x_long [B, L, V], y/y_valid [B, F, V]."""
        t = self.origins[np.asarray(indices)]
        L, F = self.layout.L, self.layout.F
        rows_x = t[:, None] + np.arange(-L, 0)[None]
        rows_y = t[:, None] + np.arange(F)[None]
        return {
            "x_long": self.inputs[rows_x],
            "x_valid": self.valid[rows_x],
            "y": self.targets[rows_y],
            "y_valid": self.valid[rows_y],
            "origin": t,
        }


def make_windows(series: TrafficSeries, layout: DataLayout,
                 normalizer: Normalizer | None = None, stride: int = 1) -> WindowSet:
    return WindowSet(series, layout, normalizer, stride)


def split_subseries(X_long, S: int):
    """``[..., L, V]`` -> ``[..., N_sub, V, S]`` non-overlapping tokens (numpy or torch)."""
    L, V = X_long.shape[-2], X_long.shape[-1]
    if L % S:
        raise LayoutError(f"L={L} is not divisible by S={S}")
    x = X_long.reshape(*X_long.shape[:-2], L // S, S, V)
    return x.swapaxes(-1, -2)


def merge_subseries(tokens):
    """Inverse of :func:`split_subseries`."""
    N, V, S = tokens.shape[-3:]
    return tokens.swapaxes(-1, -2).reshape(*tokens.shape[:-3], N * S, V)


def mask_count(n_sub: int, ratio: float) -> int:
    return int(math.floor(ratio * n_sub + 0.5))


def sample_mask(n_sub: int, ratio: float, rng: np.random.Generator):
    """Uniform subseries mask. Returns sorted ``(masked_idx, unmasked_idx)``."""
    if not 0 < ratio < 1:
        raise ValidationError(f"mask ratio must be in (0, 1), got {ratio}")
    if n_sub < 2:
        raise DegenerateMaskError(f"need at least 2 subseries, got {n_sub}")
    n_masked = mask_count(n_sub, ratio)
    if n_masked in (0, n_sub):
        raise DegenerateMaskError(f"ratio {ratio} masks {n_masked} of {n_sub} subseries")
    perm = rng.permutation(n_sub)
    return np.sort(perm[:n_masked]), np.sort(perm[n_masked:])


def periodic_indices(layout: DataLayout) -> tuple[int, int]:
    """0-based indices of the subseries one week and one day before the origin."""
    if not layout.covers_week:
        raise LayoutError(
            f"window of {layout.n_sub} subseries is shorter than one week ({7 * layout.l})"
        )
    return layout.n_sub - 7 * layout.l, layout.n_sub - layout.l


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    nodes: int = 20
    days: int = 42
    daily_amp: float = 20.0
    weekly_amp: float = 0.0
    trend_max: float = 0.0
    noise_sigma: float = 0.0
    noise_ar: float = 0.0
    rush_amp: float = 0.0
    missing_blocks: list[tuple[int, int, int | None]] = field(default_factory=list)
    seed: int = 0
    base: float = 60.0
    graph_radius: float = 0.35

    def __post_init__(self):
        if self.nodes < 1:
            raise ValidationError("nodes must be >= 1")
        if not self.days > 0:
            raise ValidationError("days must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0 <= self.noise_ar < 1:
            raise ValidationError("noise_ar must be in [0, 1)")

    @property
    def num_steps(self) -> int:
        return int(round(self.days * STEPS_PER_DAY))


def _parse_blocks(text: str) -> list[tuple[int, int, int | None]]:
    """``start:stop[:node]`` items separated by commas; no node means every node."""
    blocks = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"missing_blocks: bad item {item!r}")
        node = int(parts[2]) if len(parts) == 3 and parts[2] not in ("", "*") else None
        blocks.append((int(parts[0]), int(parts[1]), node))
    return blocks


def parse_synth_spec(text: str) -> SynthConfig:
    known = {f.name: f for f in fields(SynthConfig)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown synthetic spec key {key!r}")
        try:
            if key == "missing_blocks":
                kwargs[key] = _parse_blocks(value)
            elif key in ("nodes", "seed"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return SynthConfig(**kwargs)


def load_synth_spec(path) -> SynthConfig:
    return parse_synth_spec(Path(path).read_text())


def synth_generate(cfg: SynthConfig, rng: np.random.Generator | None = None):
    """Daily sinusoid with weekly amplitude modulation, per-node trend and noise.

    value = base_v + (daily_amp + weekly_amp * sin(week phase)) * g_v * sin(day phase)
            - rush_amp * g_v * weekday * (dip at 08:00 + dip at 17:00)
            + slope_v * t / steps_per_day + noise
    Noise is Gaussian with std noise_sigma, optionally AR(1) with coefficient noise_ar.
    Dips are Gaussian with a one-hour width; days 5 and 6 of each week have none.
    Nodes sit on a random geometric graph; daily phase follows node position.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    T, V = cfg.num_steps, cfg.nodes
    if T < 1:
        raise ValidationError("non-positive duration")
    pos = rng.uniform(0.0, 1.0, size=(V, 2))
    gain = rng.uniform(0.7, 1.3, size=V)
    base = cfg.base * rng.uniform(0.8, 1.2, size=V)
    day_phase = 0.6 * pos[:, 0] + rng.uniform(-0.1, 0.1, size=V)
    week_phase = rng.uniform(0, 2 * np.pi, size=V) * 0.2
    slope = rng.uniform(-cfg.trend_max, cfg.trend_max, size=V)

    t = np.arange(T, dtype=np.float64)[:, None]
    daily = np.sin(2 * np.pi * t / STEPS_PER_DAY + day_phase[None])
    weekly = np.sin(2 * np.pi * t / (7 * STEPS_PER_DAY) + week_phase[None])
    values = (base[None] + (cfg.daily_amp + cfg.weekly_amp * weekly) * gain[None] * daily
              + slope[None] * t / STEPS_PER_DAY)
    if cfg.rush_amp:
        minute = t % STEPS_PER_DAY
        weekday = (t // STEPS_PER_DAY) % 7 < 5
        dips = sum(np.exp(-0.5 * ((minute - c) / 12.0) ** 2) for c in (96, 204))
        values = values - cfg.rush_amp * gain[None] * weekday * dips
    if cfg.noise_sigma > 0:
        noise = rng.normal(0.0, cfg.noise_sigma, size=(T, V))
        if cfg.noise_ar:
            # AR(1) with the same marginal std
            phi, scale = cfg.noise_ar, np.sqrt(1 - cfg.noise_ar ** 2)
            for i in range(1, T):
                noise[i] = phi * noise[i - 1] + scale * noise[i]
        values = values + noise

    mask = np.ones((T, V), dtype=bool)
    for start, stop, node in cfg.missing_blocks:
        if node is None:
            mask[start:stop] = False
        else:
            mask[start:stop, node] = False
    values = np.where(mask, values, 0.0)

    d2 = ((pos[:, None] - pos[None]) ** 2).sum(-1)
    A = np.exp(-d2 / (cfg.graph_radius ** 2))
    A[d2 > cfg.graph_radius ** 2] = 0.0
    np.fill_diagonal(A, 0.0)
    series = TrafficSeries(values, np.arange(T, dtype=np.int64), mask)
    return series, TrafficGraph.from_adjacency(A)
