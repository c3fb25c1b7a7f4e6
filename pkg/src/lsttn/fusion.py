"""Fusion of long-term, periodic and short-term features into multi-horizon forecasts."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import DegenerateBatchError, LayoutError, ValidationError

VARIANTS = ("full", "no_lt", "no_p", "no_st", "st_only")


def variant_parts(variant: str) -> dict[str, bool]:
    """Which feature families a variant uses."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")
    return {
        "long": variant in ("full", "no_p", "no_st"),
        "periodic": variant in ("full", "no_lt", "no_st"),
        "short": variant != "no_st",
    }


class FusionHead(nn.Module):
    """outer(inner(H_long || H_week || H_day) || H_short) -> ``[B, F, V]``.

    Dropped feature families shrink the input widths, so no parameter goes unused.
    """

    def __init__(self, horizon: int, hidden: int = 4, d_short: int = 64, variant: str = "full",
                 h1: int = 32, h2: int = 32, h3: int = 128):
        super().__init__()
        self.parts = variant_parts(variant)
        self.variant = variant
        self.hidden = hidden
        self.d_short = d_short
        n_long = self.parts["long"] + 2 * self.parts["periodic"]
        self.inner = None
        outer_in = 0
        if n_long:
            self.inner = nn.Sequential(nn.Linear(n_long * hidden, h1), nn.GELU(), nn.Linear(h1, h2))
            outer_in += h2
        if self.parts["short"]:
            outer_in += d_short
        self.outer = nn.Sequential(nn.Linear(outer_in, h3), nn.GELU(), nn.Linear(h3, horizon))

    def forward(self, h_long=None, h_week=None, h_day=None, h_short=None):
        feats = []
        if self.inner is not None:
            long_feats = []
            if self.parts["long"]:
                long_feats.append(h_long)
            if self.parts["periodic"]:
                long_feats += [h_week, h_day]
            if any(f is None for f in long_feats):
                raise LayoutError(f"variant {self.variant!r} is missing a long-term feature")
            for f in long_feats:
                if f.shape[-1] != self.hidden:
                    raise LayoutError(f"feature width {f.shape[-1]} != {self.hidden}")
            feats.append(self.inner(torch.cat(long_feats, dim=-1)))
        if self.parts["short"]:
            if h_short is None or h_short.shape[-1] != self.d_short:
                raise LayoutError(f"variant {self.variant!r} needs H_short of width {self.d_short}")
            feats.append(h_short)
        out = self.outer(torch.cat(feats, dim=-1))  # [B, V, F]
        return out.transpose(-1, -2)


def forecast_loss(y_hat, y, y_missing):
    """Mean absolute error over targets that are not missing."""
    if y_hat.shape != y.shape or y_missing.shape != y.shape:
        raise LayoutError(f"shape mismatch {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    ok = (~y_missing).to(y_hat.dtype)
    n = ok.sum()
    if n == 0:
        raise DegenerateBatchError("no valid targets in batch")
    return ((y_hat - y).abs() * ok).sum() / n


def masked_l1(y_hat, y, valid):
    return forecast_loss(y_hat, y, ~valid)

