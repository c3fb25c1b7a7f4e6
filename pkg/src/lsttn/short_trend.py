"""Short-term trend extractors: a small registry plus a Graph WaveNet style reference model."""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayoutError, RegistryError
from .periodicity import DiffusionGraphConv, adaptive_adjacency


class ShortTrendModel(nn.Module):
    """Interface: ``forward(x_short [B, S, V], P_f, P_b) -> H_short [B, V, d_short]``.

    ``P_f``/``P_b`` are the graph transition matrices, or ``None`` without a graph.
    """

    d_short: int


_REGISTRY: dict[str, Callable[..., ShortTrendModel]] = {}


def register_stgnn(name: str, constructor: Callable[..., ShortTrendModel]) -> None:
    if name in _REGISTRY:
        raise RegistryError(f"short-term model {name!r} is already registered")
    _REGISTRY[name] = constructor


def construct_stgnn(name: str, **config) -> ShortTrendModel:
    try:
        ctor = _REGISTRY[name]
    except KeyError:
        raise RegistryError(
            f"unknown short-term model {name!r}; known: {', '.join(sorted(_REGISTRY))}"
        ) from None
    return ctor(**config)


def registered_stgnns() -> list[str]:
    return sorted(_REGISTRY)


class GatedTemporalConv(nn.Module):
    """tanh(filter) * sigmoid(gate), kernel 2, valid along time. ``x``: ``[B, T, V, C]``."""

    def __init__(self, c_in: int, c_out: int, dilation: int):
        super().__init__()
        self.dilation = dilation
        self.filter = nn.Linear(2 * c_in, c_out)
        self.gate = nn.Linear(2 * c_in, c_out)

    def forward(self, x):
        d = self.dilation
        if x.shape[1] <= d:
            raise LayoutError(f"temporal length {x.shape[1]} too short for dilation {d}")
        pair = torch.cat([x[:, :-d], x[:, d:]], dim=-1)
        return torch.tanh(self.filter(pair)) * torch.sigmoid(self.gate(pair))


class GraphWaveNet(ShortTrendModel):
    """Gated dilated temporal convolutions interleaved with diffusion graph convolutions.

    The returned feature is the aggregated skip connection at the last time step,
    passed through one projection to ``d_short``.
    """

    def __init__(self, num_nodes: int, in_len: int = 12, channels: int = 16,
                 skip_channels: int = 64, d_short: int = 64, blocks: int = 4,
                 dilations: tuple[int, ...] = (1, 2), K: int = 2, d_emb: int = 10,
                 dropout: float = 0.3, use_graph: bool = True):
        super().__init__()
        self.in_len = in_len
        self.d_short = d_short
        self.use_graph = use_graph
        self.dropout = dropout
        self.receptive_field = 1 + blocks * sum(dilations)
        self.start = nn.Linear(1, channels)
        self.E1 = nn.Parameter(torch.randn(num_nodes, d_emb))
        self.E2 = nn.Parameter(torch.randn(num_nodes, d_emb))
        n_sup = 3 if use_graph else 1
        self.temporal = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.gconvs = nn.ModuleList()
        for _ in range(blocks):
            for d in dilations:
                self.temporal.append(GatedTemporalConv(channels, channels, d))
                self.skips.append(nn.Linear(channels, skip_channels))
                self.gconvs.append(DiffusionGraphConv(channels, channels, n_sup, K, bias=True))
        self.end = nn.Linear(skip_channels, d_short)

    def forward(self, x_short, P_f=None, P_b=None):
        if x_short.shape[1] != self.in_len:
            raise LayoutError(f"expected {self.in_len} input steps, got {x_short.shape[1]}")
        A_adp = adaptive_adjacency(self.E1, self.E2)
        supports = [P_f, P_b, A_adp] if self.use_graph else [A_adp]
        if any(s is None for s in supports):
            raise LayoutError("graph transition matrices required when use_graph=True")
        x = x_short.unsqueeze(-1)
        if x.shape[1] < self.receptive_field:
            x = F.pad(x, (0, 0, 0, 0, self.receptive_field - x.shape[1], 0))
        x = self.start(x)  # [B, T, V, C]
        skip = 0
        for tconv, skip_lin, gconv in zip(self.temporal, self.skips, self.gconvs):
            residual = x
            h = tconv(x)
            skip = skip + skip_lin(h[:, -1])
            h = F.dropout(gconv(h, supports), self.dropout, self.training)
            x = h + residual[:, -h.shape[1]:]
        return F.relu(self.end(F.relu(skip)))


register_stgnn("ref_gwnet", GraphWaveNet)
