"""Brute-force reference computations for tests.

Everything here is written with explicit Python loops over numpy arrays and
imports nothing from the production modules. Slow by design; refuses large inputs.
"""

import math

import numpy as np

MAX_NODES = 16
MAX_LEN = 512


def _guard(nodes=0, length=0):
    if nodes > MAX_NODES or length > MAX_LEN:
        raise ValueError(f"oracle refuses V={nodes}, len={length} (limits {MAX_NODES}, {MAX_LEN})")


def oracle_dilated_conv(x, kernel, d):
    """out[m] = sum_j C_j x[m - d*j] for every m whose taps stay inside the sequence.

    ``x`` is ``[len]`` or ``[len, c_in]``; ``kernel`` is ``[k]`` or ``[k, c_in, c_out]``.
    Output is ``[len - (k-1)d]`` or ``[len - (k-1)d, c_out]``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    scalar = x.ndim == 1
    if scalar:
        x = x[:, None]
        kernel = kernel[:, None, None]
    n, c_in = x.shape
    k, _, c_out = kernel.shape
    _guard(length=n)
    first = (k - 1) * d
    out = np.zeros((n - first, c_out))
    for m in range(first, n):
        for o in range(c_out):
            acc = 0.0
            for j in range(k):
                for c in range(c_in):
                    acc += kernel[j, c, o] * x[m - d * j, c]
            out[m - first, o] = acc
    return out[:, 0] if scalar else out


def oracle_causal_dilated_conv(x, kernel, d):
    """Same sum with taps before the start treated as zeros; output keeps the input length."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel).shape[0]
    pad = np.zeros(((k - 1) * d,) + x.shape[1:])
    return oracle_dilated_conv(np.concatenate([pad, x]), kernel, d)


def _matmul(A, B):
    n, m = len(A), len(B[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(len(B)):
                s += A[i][t] * B[t][j]
            out[i, j] = s
    return out


def _matpow(P, k):
    out = np.eye(len(P))
    for _ in range(k):
        out = _matmul(out, P)
    return out


def oracle_diffusion(Sx, P_f, P_b, A_adp, W, K):
    """sum_k P_f^k Sx W[k,0] + P_b^k Sx W[k,1] + A_adp^k Sx W[k,2] with explicit matrix powers.

    ``W`` is ``[K+1, n_supports, d_in, d_out]``; pass ``None`` for an absent support,
    which skips it (supports are matched to W's second axis in the given order).
    """
    Sx = np.asarray(Sx, dtype=np.float64)
    _guard(nodes=Sx.shape[0])
    supports = [np.asarray(P, dtype=np.float64) for P in (P_f, P_b, A_adp) if P is not None]
    W = np.asarray(W, dtype=np.float64)
    out = np.zeros((Sx.shape[0], W.shape[-1]))
    for k in range(K + 1):
        for s, P in enumerate(supports):
            out += _matmul(_matmul(_matpow(P, k), Sx), W[k, s])
    return out


def oracle_masked_metrics(y_hat, y, valid):
    """Loop-based masked (mae, rmse, mape); MAPE skips zero ground truth."""
    y_hat, y, valid = (np.asarray(a).ravel() for a in (y_hat, y, valid))
    n = n_pct = 0
    abs_sum = sq_sum = pct_sum = 0.0
    for a, b, ok in zip(y_hat, y, valid):
        if not ok:
            continue
        n += 1
        abs_sum += abs(a - b)
        sq_sum += (a - b) ** 2
        if b != 0:
            n_pct += 1
            pct_sum += abs((a - b) / b)
    if n == 0:
        raise ValueError("no valid entries")
    mape = pct_sum / n_pct if n_pct else float("nan")
    return abs_sum / n, math.sqrt(sq_sum / n), mape


def oracle_finite_diff(fn, params, eps=1e-4):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each array in ``params``.

    ``params`` is a list of mutable float64 arrays (numpy, or anything supporting
    item assignment and ``.copy()``); ``fn`` reads them by reference.
    """
    grads = []
    for p in params:
        g = np.zeros(p.shape)
        flat_index = np.ndindex(*p.shape)
        for idx in flat_index:
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(fn())
            p[idx] = orig - eps
            down = float(fn())
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    """max over entries of |a - b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def _layer_norm(v, gamma, beta, eps):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(v, gamma, beta)]


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _affine(v, W, b):
    # W is [out, in] (torch Linear layout)
    return [sum(W[o][i] * v[i] for i in range(len(v))) + (b[o] if b is not None else 0.0)
            for o in range(len(W))]


def oracle_encoder_layer(x, p, n_heads, eps=1e-5):
    """One pre-norm Transformer encoder layer on a single sequence ``x[n, d]``.

    ``p`` maps names to numpy arrays: ln1_w, ln1_b, qkv_w [3d, d], qkv_b, out_w, out_b,
    ln2_w, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b. Returns (output, attention [h, n, n]).
    """
    x = [list(map(float, row)) for row in np.asarray(x)]
    n, d = len(x), len(x[0])
    _guard(length=n)
    dh = d // n_heads
    h1 = [_layer_norm(row, p["ln1_w"], p["ln1_b"], eps) for row in x]
    qkv = [_affine(row, p["qkv_w"], p["qkv_b"]) for row in h1]
    attn = np.zeros((n_heads, n, n))
    ctx = [[0.0] * d for _ in range(n)]
    for h in range(n_heads):
        lo = h * dh
        for i in range(n):
            q = qkv[i][lo:lo + dh]
            scores = []
            for j in range(n):
                kv = qkv[j][d + lo:d + lo + dh]
                scores.append(sum(a * b for a, b in zip(q, kv)) / math.sqrt(dh))
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(n):
                attn[h, i, j] = e[j] / z
                vv = qkv[j][2 * d + lo:2 * d + lo + dh]
                for c in range(dh):
                    ctx[i][lo + c] += attn[h, i, j] * vv[c]
    y = [[a + b for a, b in zip(x[i], _affine(ctx[i], p["out_w"], p["out_b"]))] for i in range(n)]
    out = []
    for row in y:
        h2 = _layer_norm(row, p["ln2_w"], p["ln2_b"], eps)
        f = [_gelu(v) for v in _affine(h2, p["ff1_w"], p["ff1_b"])]
        f = _affine(f, p["ff2_w"], p["ff2_b"])
        out.append([a + b for a, b in zip(row, f)])
    return np.array(out), attn
