"""Masked subseries Transformer: per-node temporal encoder pretrained by masked reconstruction."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import split_subseries
from .errors import DegenerateBatchError, LayoutError, NumericError, ValidationError


def sinusoidal_table(n: int, d: int):
    """Initial values for the learnable position table."""
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float32) / d)
    table = torch.zeros(n, d)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return table


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValidationError(f"n_heads={n_heads} does not divide d_model={d_model}")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, return_weights: bool = False):
        # x: [B, n, d]
        B, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        weights = scores.softmax(dim=-1)
        ctx = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, n, d)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class EncoderLayer(nn.Module):
    """Pre-norm layer: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.1):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, dropout)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, return_weights: bool = False):
        a, w = self.attn(self.ln1(x), return_weights=True)
        x = x + self.drop(a)
        x = x + self.drop(self.ff2(self.drop(F.gelu(self.ff1(self.ln2(x))))))
        return (x, w) if return_weights else x


class TransformerEncoder(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, n_layers, dropout=0.1):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)
        )
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after encoder layer {i}")
        return self.norm(x)


class MaskedSubseriesTransformer(nn.Module):
    """Subseries encoder (the representation learner) plus a reconstruction head.

    Tensors follow ``[batch, N_sub, V, ...]``; every node's subseries sequence is
    encoded independently with shared weights.
    """

    def __init__(self, n_sub: int, patch_len: int, d_repr: int = 64, n_layers: int = 4,
                 n_heads: int = 4, d_ff: int | None = None, dropout: float = 0.1):
        super().__init__()
        if d_repr <= 0:
            raise ValidationError("d_repr must be positive")
        d_ff = 4 * d_repr if d_ff is None else d_ff
        self.n_sub = n_sub
        self.patch_len = patch_len
        self.d_repr = d_repr
        self.token_projection = nn.Linear(patch_len, d_repr, bias=False)
        self.positional_embedding = nn.Parameter(torch.empty(n_sub, d_repr))
        self.mask_token = nn.Parameter(torch.empty(d_repr))
        self.encoder = TransformerEncoder(d_repr, n_heads, d_ff, n_layers, dropout)
        self.head_layer = EncoderLayer(d_repr, n_heads, d_ff, dropout)
        self.head_norm = nn.LayerNorm(d_repr)
        self.head_out = nn.Linear(d_repr, patch_len)
        with torch.no_grad():
            self.positional_embedding.copy_(sinusoidal_table(n_sub, d_repr))
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    # -- pieces -------------------------------------------------------------

    def embed(self, tokens, positions=None):
        """``[B, n, V, S]`` -> ``[B, n, V, d]``; ``positions`` selects the table rows."""
        if tokens.shape[-1] != self.patch_len:
            raise LayoutError(f"token length {tokens.shape[-1]} != S={self.patch_len}")
        pos = self.positional_embedding if positions is None else self.positional_embedding[positions]
        if tokens.shape[-3] != pos.shape[0]:
            raise LayoutError(f"{tokens.shape[-3]} tokens for {pos.shape[0]} positions")
        return self.token_projection(tokens) + pos[:, None, :]

    def strl(self, emb):
        """Encode ``[B, n, V, d]`` along the subseries axis, per node."""
        B, n, V, d = emb.shape
        if n < 1:
            raise LayoutError("need at least one token")
        seq = emb.permute(0, 2, 1, 3).reshape(B * V, n, d)
        out = self.encoder(seq)
        return out.reshape(B, V, n, d).permute(0, 2, 1, 3)

    def task_head(self, s_unmasked, unmasked_idx, masked_idx):
        """Reassemble the full sequence with mask tokens and reconstruct ``[B, N, V, S]``."""
        unmasked_idx = torch.as_tensor(unmasked_idx, dtype=torch.long)
        masked_idx = torch.as_tensor(masked_idx, dtype=torch.long)
        all_idx = torch.cat([unmasked_idx, masked_idx])
        if len(all_idx) != self.n_sub or len(torch.unique(all_idx)) != self.n_sub:
            raise ValidationError("masked and unmasked indices must partition the subseries")
        B, _, V, d = s_unmasked.shape
        fill = self.mask_token + self.positional_embedding[masked_idx]  # [n_m, d]
        full = s_unmasked.new_empty(B, self.n_sub, V, d)
        full[:, unmasked_idx] = s_unmasked
        full[:, masked_idx] = fill[None, :, None, :].expand(B, -1, V, -1)
        seq = full.permute(0, 2, 1, 3).reshape(B * V, self.n_sub, d)
        seq = self.head_norm(self.head_layer(seq))
        out = self.head_out(seq)
        return out.reshape(B, V, self.n_sub, self.patch_len).permute(0, 2, 1, 3)

    # -- entry points ---------------------------------------------------------

    def forward(self, x_long, masked_idx, unmasked_idx):
        """Reconstruction of every subseries from the unmasked ones; ``x_long`` is ``[B, L, V]``."""
        tokens = split_subseries(x_long, self.patch_len)
        if tokens.shape[-3] != self.n_sub:
            raise LayoutError(f"got {tokens.shape[-3]} subseries, model expects {self.n_sub}")
        unmasked_idx = torch.as_tensor(unmasked_idx, dtype=torch.long)
        emb = self.embed(tokens[:, unmasked_idx], unmasked_idx)
        return self.task_head(self.strl(emb), unmasked_idx, masked_idx)

    def encode(self, x_long):
        """Representations of all subseries, no masking: ``[B, L, V]`` -> ``[B, N, V, d]``."""
        tokens = split_subseries(x_long, self.patch_len)
        if tokens.shape[-3] != self.n_sub:
            raise LayoutError(f"got {tokens.shape[-3]} subseries, model expects {self.n_sub}")
        return self.strl(self.embed(tokens))


def encode_all(model: MaskedSubseriesTransformer, x_long, chunk: int | None = None):
    """Deterministic inference-mode encoding; optional chunking over the batch axis."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if chunk is None or x_long.shape[0] <= chunk:
                return model.encode(x_long)
            return torch.cat([model.encode(x_long[i:i + chunk])
                              for i in range(0, x_long.shape[0], chunk)])
    finally:
        model.train(was_training)


def pretrain_loss(x_hat, tokens, masked_idx, valid):
    """Mean absolute error over masked subseries, valid entries only.

    All of ``x_hat``, ``tokens``, ``valid`` are ``[B, N, V, S]``.
    """
    if x_hat.shape != tokens.shape or valid.shape != tokens.shape:
        raise LayoutError("pretrain_loss shapes differ")
    masked_idx = torch.as_tensor(masked_idx, dtype=torch.long)
    pred = x_hat.index_select(-3, masked_idx)
    true = tokens.index_select(-3, masked_idx)
    ok = valid.index_select(-3, masked_idx).to(pred.dtype)
    n = ok.sum()
    if n == 0:
        raise DegenerateBatchError("no valid entries inside masked subseries")
    return ((pred - true).abs() * ok).sum() / n
