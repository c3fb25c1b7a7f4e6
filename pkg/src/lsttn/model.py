"""The assembled long/short-term forecaster."""

from __future__ import annotations

import torch
import torch.nn as nn

from .data import DataLayout, TrafficGraph, periodic_indices
from .fusion import FusionHead, variant_parts
from .long_trend import LongTrendExtractor
from .mst import MaskedSubseriesTransformer, encode_all
from .periodicity import PeriodicityExtractor
from .short_trend import construct_stgnn


class LSTTN(nn.Module):
    """Frozen (or fine-tuned) subseries encoder + three extractors + fusion head.

    ``forward`` maps normalized ``x_long [B, L, V]`` to normalized forecasts ``[B, F, V]``.
    Precomputed representations ``[B, N_sub, V, d]`` may be passed as ``reps``.
    """

    def __init__(self, layout: DataLayout, num_nodes: int, mst: MaskedSubseriesTransformer | None,
                 graph: TrafficGraph | None = None, variant: str = "full", hidden: int = 4,
                 kernel_size: int = 2, K: int = 2, d_emb: int = 10, stgnn: str = "ref_gwnet",
                 stgnn_config: dict | None = None, fusion_sizes=(32, 32, 128),
                 finetune_strl: bool = False):
        super().__init__()
        self.layout = layout
        self.variant = variant
        self.parts = variant_parts(variant)
        self.finetune_strl = finetune_strl
        self.needs_reps = self.parts["long"] or self.parts["periodic"]
        use_graph = graph is not None
        if graph is not None:
            self.register_buffer("P_f", torch.as_tensor(graph.P_f, dtype=torch.float32))
            self.register_buffer("P_b", torch.as_tensor(graph.P_b, dtype=torch.float32))
        else:
            self.P_f = self.P_b = None

        self.mst = mst if self.needs_reps else None
        if self.mst is not None and not finetune_strl:
            for p in self.mst.parameters():
                p.requires_grad_(False)
        d_repr = mst.d_repr if mst is not None else 0

        self.long_trend = (LongTrendExtractor(layout.n_sub, d_repr, hidden, kernel_size)
                           if self.parts["long"] else None)
        self.periodicity = None
        if self.parts["periodic"]:
            self.idx_week, self.idx_day = periodic_indices(layout)
            self.periodicity = PeriodicityExtractor(num_nodes, d_repr, hidden, K, d_emb, use_graph)
        self.short_trend = None
        d_short = 0
        if self.parts["short"]:
            cfg = dict(stgnn_config or {})
            cfg.setdefault("in_len", layout.S)
            cfg.setdefault("use_graph", use_graph)
            self.short_trend = construct_stgnn(stgnn, num_nodes=num_nodes, **cfg)
            d_short = self.short_trend.d_short
        h1, h2, h3 = fusion_sizes
        self.fusion = FusionHead(layout.F, hidden, d_short, variant, h1, h2, h3)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode(self, x_long):
        if self.finetune_strl:
            return self.mst.encode(x_long)
        return encode_all(self.mst, x_long)

    def forward(self, x_long, reps=None):
        h_long = h_week = h_day = h_short = None
        if self.needs_reps:
            if reps is None:
                reps = self.encode(x_long)
            if self.long_trend is not None:
                h_long = self.long_trend(reps)
            if self.periodicity is not None:
                h_week, h_day = self.periodicity(reps, self.idx_week, self.idx_day, self.P_f, self.P_b)
        if self.short_trend is not None:
            h_short = self.short_trend(x_long[:, -self.layout.S:], self.P_f, self.P_b)
        return self.fusion(h_long, h_week, h_day, h_short)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.mst is not None and not self.finetune_strl:
            self.mst.eval()
        return self
