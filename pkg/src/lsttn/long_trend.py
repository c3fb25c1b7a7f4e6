"""Long-term trend extractor: stacked dilated 1-D convolutions over subseries representations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayoutError


@dataclass(frozen=True)
class ConvLayerSpec:
    dilation: int
    padded: bool
    len_in: int
    len_out: int


def layer_plan(n_sub: int, kernel_size: int = 2, max_layers: int = 32) -> list[ConvLayerSpec]:
    """Dilations 2, 4, 8, ... until the temporal length reaches 1.

    A layer runs as a valid convolution when that leaves at least 2 positions for
    pooling; otherwise the input is left-padded with zeros (causal) so that no
    position is dropped.
    """
    if n_sub < 2:
        raise LayoutError(f"long-term extractor needs at least 2 subseries, got {n_sub}")
    plan, length, i = [], n_sub, 1
    while length > 1:
        if i > max_layers:
            raise LayoutError(f"cannot reduce length {n_sub} to 1 in {max_layers} layers")
        d = 2 ** i
        valid_len = length - (kernel_size - 1) * d
        padded = valid_len < 2
        conv_len = length if padded else valid_len
        plan.append(ConvLayerSpec(d, padded, length, conv_len // 2))
        length = conv_len // 2
        i += 1
    return plan


def dilated_conv(x, kernel, dilation: int, padded: bool = False):
    """out[m] = sum_j kernel[j] x[m - dilation*j] along the last axis.

    ``x``: ``[B, c_in, len]``; ``kernel``: ``[k, c_in, c_out]`` with tap ``j`` applied at lag
    ``j``. Valid mode returns ``len - (k-1)*dilation`` positions.
    """
    k = kernel.shape[0]
    span = (k - 1) * dilation
    if padded:
        x = F.pad(x, (span, 0))
    elif x.shape[-1] < span + 1:
        raise LayoutError(f"sequence of length {x.shape[-1]} shorter than kernel span {span + 1}")
    # conv1d correlates forward in time, so lag j sits at tap k-1-j
    weight = kernel.permute(2, 1, 0).flip(-1)
    return F.conv1d(x, weight, dilation=dilation)


def dilated_conv_layer(x, kernel, dilation: int, padded: bool = False):
    """One layer: dilated conv, gelu, max-pool (2, 2).

    Pairs are aligned to the newest position; with an odd length the oldest one is dropped.
    """
    h = F.gelu(dilated_conv(x, kernel, dilation, padded))
    return F.max_pool1d(h[..., h.shape[-1] % 2:], 2, 2)


class LongTrendExtractor(nn.Module):
    def __init__(self, n_sub: int, d_in: int, hidden: int = 4, kernel_size: int = 2):
        super().__init__()
        self.plan = layer_plan(n_sub, kernel_size)
        self.n_sub = n_sub
        self.hidden = hidden
        self.kernels = nn.ParameterList()
        c_in = d_in
        for _ in self.plan:
            w = torch.empty(kernel_size, c_in, hidden)
            nn.init.uniform_(w, -1 / (c_in * kernel_size) ** 0.5, 1 / (c_in * kernel_size) ** 0.5)
            self.kernels.append(nn.Parameter(w))
            c_in = hidden

    def forward(self, S):
        """``S``: ``[B, N_sub, V, d]`` -> ``H_long``: ``[B, V, hidden]``."""
        B, N, V, d = S.shape
        if N != self.n_sub:
            raise LayoutError(f"expected {self.n_sub} subseries, got {N}")
        x = S.permute(0, 2, 3, 1).reshape(B * V, d, N)
        for spec, kernel in zip(self.plan, self.kernels):
            x = dilated_conv_layer(x, kernel, spec.dilation, spec.padded)
        return x.reshape(B, V, self.hidden)
