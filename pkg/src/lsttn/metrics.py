"""Masked RMSE / MAE / MAPE and per-horizon reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, LayoutError

HORIZONS = (3, 6, 12)
COLUMNS = ("horizon", "rmse", "mae", "mape", "n_valid")


def _prepare(y_hat, y, valid):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not (y_hat.shape == y.shape == valid.shape):
        raise LayoutError(f"shape mismatch {y_hat.shape}, {y.shape}, {valid.shape}")
    if not valid.any():
        raise DegenerateDataError("no valid entries")
    return y_hat, y, valid


def masked_mae(y_hat, y, valid) -> float:
    y_hat, y, valid = _prepare(y_hat, y, valid)
    return float(np.abs(y_hat - y)[valid].mean())


def masked_rmse(y_hat, y, valid) -> float:
    y_hat, y, valid = _prepare(y_hat, y, valid)
    return float(np.sqrt(((y_hat - y) ** 2)[valid].mean()))


def masked_mape(y_hat, y, valid) -> float:
    """Fraction, not percent. Zero ground truth is excluded."""
    y_hat, y, valid = _prepare(y_hat, y, valid)
    valid = valid & (y != 0)
    if not valid.any():
        raise DegenerateDataError("no valid non-zero targets for MAPE")
    return float((np.abs(y_hat - y)[valid] / np.abs(y[valid])).mean())


@dataclass(frozen=True)
class HorizonRow:
    horizon: int
    rmse: float
    mae: float
    mape: float
    n_valid: int


@dataclass
class HorizonReport:
    rows: list[HorizonRow]

    def __getitem__(self, horizon: int) -> HorizonRow:
        for r in self.rows:
            if r.horizon == horizon:
                return r
        raise KeyError(horizon)

    def mae(self, horizon: int) -> float:
        return self[horizon].mae

    def to_rows(self) -> list[list]:
        return [[r.horizon, r.rmse, r.mae, r.mape, r.n_valid] for r in self.rows]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for row in self.to_rows():
                w.writerow([row[0], *(repr(float(v)) for v in row[1:4]), row[4]])

    @classmethod
    def from_csv(cls, path) -> "HorizonReport":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([HorizonRow(int(r["horizon"]), float(r["rmse"]), float(r["mae"]),
                               float(r["mape"]), int(r["n_valid"])) for r in rows])

    def to_text(self) -> str:
        lines = [f"{'horizon':>8} {'rmse':>10} {'mae':>10} {'mape':>10} {'n_valid':>9}"]
        for r in self.rows:
            lines.append(f"{r.horizon:>8d} {r.rmse:>10.4f} {r.mae:>10.4f} {r.mape:>10.4%} {r.n_valid:>9d}")
        return "\n".join(lines) + "\n"


def horizon_report(y_hat, y, valid, horizons=HORIZONS) -> HorizonReport:
    """Metrics at single forecast steps ``h`` (1-based) over all samples and nodes.

    Arrays are ``[n_samples, F, V]`` in data units.
    """
    y_hat, y, valid = (np.asarray(a) for a in (y_hat, y, valid))
    if y.ndim != 3:
        raise LayoutError(f"expected [n, F, V] arrays, got {y.shape}")
    if max(horizons) > y.shape[1]:
        raise LayoutError(f"forecast length {y.shape[1]} shorter than horizon {max(horizons)}")
    rows = []
    for h in horizons:
        a, b, m = y_hat[:, h - 1], y[:, h - 1], valid[:, h - 1]
        row = HorizonRow(h, masked_rmse(a, b, m), masked_mae(a, b, m),
                         masked_mape(a, b, m), int(np.asarray(m, bool).sum()))
        assert row.mae <= row.rmse + 1e-12, "MAE exceeds RMSE"
        rows.append(row)
    return HorizonReport(rows)


def ablation_table(reports: dict[str, HorizonReport]) -> list[list]:
    """Rows ``[variant, rmse@3, mae@3, mape@3, rmse@6, ...]``."""
    out = []
    for variant, rep in reports.items():
        row = [variant]
        for r in rep.rows:
            row += [r.rmse, r.mae, r.mape]
        out.append(row)
    return out


def write_ablation(reports: dict[str, HorizonReport], csv_path, txt_path=None) -> None:
    horizons = [r.horizon for r in next(iter(reports.values())).rows]
    header = ["variant"] + [f"{m}@{h}" for h in horizons for m in ("rmse", "mae", "mape")]
    rows = ablation_table(reports)
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    if txt_path is not None:
        lines = ["".join(f"{h:>12}" for h in header)]
        for row in rows:
            lines.append(f"{row[0]:>12}" + "".join(f"{v:>12.4f}" for v in row[1:]))
        Path(txt_path).write_text("\n".join(lines) + "\n")
