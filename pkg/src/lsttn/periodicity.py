"""Periodicity extractor: diffusion graph convolution of last-week and last-day representations."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import LayoutError, ValidationError


def adaptive_adjacency(E1, E2):
    """Row-stochastic learned adjacency ``softmax(relu(E1 @ E2.T))``."""
    return torch.softmax(torch.relu(E1 @ E2.T), dim=1)


def diffusion_graph_conv(x, supports, weights, K: int):
    """``sum_k sum_s P_s^k x W[k, s]`` with ``P^0 = I``.

    ``x``: ``[..., V, d_in]``; ``supports``: list of ``[V, V]``; ``weights``:
    ``[K+1, len(supports), d_in, d_out]``. Powers are applied iteratively.
    """
    if K < 0:
        raise ValidationError(f"diffusion depth K must be >= 0, got {K}")
    if weights.shape[0] != K + 1 or weights.shape[1] != len(supports):
        raise LayoutError(
            f"weights {tuple(weights.shape[:2])} do not match K+1={K + 1}, supports={len(supports)}"
        )
    V = x.shape[-2]
    out = None
    for s, P in enumerate(supports):
        if P.shape != (V, V):
            raise LayoutError(f"support {s} has shape {tuple(P.shape)}, expected ({V}, {V})")
        h = x
        for k in range(K + 1):
            if k:
                h = torch.einsum("vw,...wd->...vd", P, h)
            term = h @ weights[k, s]
            out = term if out is None else out + term
    return out


class DiffusionGraphConv(nn.Module):
    def __init__(self, d_in: int, d_out: int, n_supports: int, K: int = 2, bias: bool = False):
        super().__init__()
        if K < 0:
            raise ValidationError(f"diffusion depth K must be >= 0, got {K}")
        self.K = K
        self.weight = nn.Parameter(torch.empty(K + 1, n_supports, d_in, d_out))
        bound = 1 / (d_in * n_supports * (K + 1)) ** 0.5
        nn.init.uniform_(self.weight, -bound, bound)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x, supports):
        out = diffusion_graph_conv(x, supports, self.weight, self.K)
        return out if self.bias is None else out + self.bias


class PeriodicityExtractor(nn.Module):
    """Separate diffusion convolutions for the week-ago and day-ago subseries.

    With ``use_graph=False`` only the adaptive adjacency is used.
    """

    def __init__(self, num_nodes: int, d_repr: int, hidden: int = 4, K: int = 2,
                 d_emb: int = 10, use_graph: bool = True):
        super().__init__()
        self.use_graph = use_graph
        n_sup = 3 if use_graph else 1
        self.E1 = nn.Parameter(torch.randn(num_nodes, d_emb))
        self.E2 = nn.Parameter(torch.randn(num_nodes, d_emb))
        self.week = DiffusionGraphConv(d_repr, hidden, n_sup, K)
        self.day = DiffusionGraphConv(d_repr, hidden, n_sup, K)

    def supports(self, P_f=None, P_b=None):
        A_adp = adaptive_adjacency(self.E1, self.E2)
        if not self.use_graph:
            return [A_adp]
        if P_f is None or P_b is None:
            raise ValidationError("graph transition matrices required when use_graph=True")
        return [P_f, P_b, A_adp]

    def forward(self, S, idx_week: int, idx_day: int, P_f=None, P_b=None):
        """``S``: ``[B, N_sub, V, d]`` -> ``(H_week, H_day)`` each ``[B, V, hidden]``."""
        if not (0 <= idx_week < S.shape[1] and 0 <= idx_day < S.shape[1]):
            raise LayoutError(f"periodic indices ({idx_week}, {idx_day}) outside {S.shape[1]} subseries")
        sup = self.supports(P_f, P_b)
        return self.week(S[:, idx_week], sup), self.day(S[:, idx_day], sup)
