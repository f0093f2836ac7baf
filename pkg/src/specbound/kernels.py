"""Compiled per-position kernels for the toy transformer.

Every reduction runs in a fixed, explicit loop order and fastmath is off, so a
position's result depends only on its inputs and never on how many other
positions are processed in the same call. That property is what lets lazily
extended draft states match a contiguous forward pass bit for bit.
"""
from __future__ import annotations

import numpy as np
from numba import njit

RMS_EPS = 1e-6


@njit(cache=True)
def matvec(x, w, out):
    """out = x @ w, accumulating over rows of ``w`` in ascending order."""
    n_in, n_out = w.shape
    for j in range(n_out):
        out[j] = 0.0
    for i in range(n_in):
        xi = x[i]
        for j in range(n_out):
            out[j] += xi * w[i, j]


@njit(cache=True)
def rmsnorm(x, scale, out):
    d = x.shape[0]
    ss = 0.0
    for i in range(d):
        ss += x[i] * x[i]
    r = 1.0 / np.sqrt(ss / d + RMS_EPS)
    for i in range(d):
        out[i] = x[i] * r * scale[i]


@njit(cache=True)
def layer_position(h_in, pos, keys, values, g_attn, wq, wk, wv, wo, g_ffn, w1, w2, h_out):
    """One pre-norm layer for a single position.

    ``keys``/``values`` are this layer's (max_context, dim) buffers; rows
    ``0..pos-1`` must already be filled. Row ``pos`` is written here.
    """
    d = h_in.shape[0]
    a = np.empty(d)
    q = np.empty(d)
    rmsnorm(h_in, g_attn, a)
    matvec(a, wq, q)
    matvec(a, wk, keys[pos])
    matvec(a, wv, values[pos])

    inv_sqrt_d = 1.0 / np.sqrt(d)
    scores = np.empty(pos + 1)
    m = -np.inf
    for j in range(pos + 1):
        s = 0.0
        for i in range(d):
            s += q[i] * keys[j, i]
        s *= inv_sqrt_d
        scores[j] = s
        if s > m:
            m = s
    z = 0.0
    for j in range(pos + 1):
        scores[j] = np.exp(scores[j] - m)
        z += scores[j]
    ctx = np.zeros(d)
    for j in range(pos + 1):
        wj = scores[j] / z
        for i in range(d):
            ctx[i] += wj * values[j, i]

    attn_out = np.empty(d)
    matvec(ctx, wo, attn_out)
    for i in range(d):
        h_out[i] = h_in[i] + attn_out[i]

    b = np.empty(d)
    rmsnorm(h_out, g_ffn, b)
    u = np.empty(w1.shape[1])
    matvec(b, w1, u)
    for i in range(u.shape[0]):
        u[i] = u[i] / (1.0 + np.exp(-u[i]))  # SiLU
    f = np.empty(d)
    matvec(u, w2, f)
    for i in range(d):
        h_out[i] += f[i]


@njit(cache=True)
def head_logits(h, w, gain, out):
    """out = gain * rmsnorm(h) @ w (unit norm scale)."""
    d = h.shape[0]
    ss = 0.0
    for i in range(d):
        ss += h[i] * h[i]
    r = gain / np.sqrt(ss / d + RMS_EPS)
    n_out = w.shape[1]
    for j in range(n_out):
        out[j] = 0.0
    for i in range(d):
        xi = h[i] * r
        for j in range(n_out):
            out[j] += xi * w[i, j]


@njit(cache=True)
def top1(logits, temperature):
    """Return (argmax with lowest-id tie-break, max softmax(logits / T))."""
    best = 0
    m = logits[0]
    for j in range(1, logits.shape[0]):
        if logits[j] > m:
            m = logits[j]
            best = j
    z = 0.0
    for j in range(logits.shape[0]):
        z += np.exp((logits[j] - m) / temperature)
    return best, 1.0 / z


@njit(cache=True)
def advance(states, high_water, n, pos0, target, g_attn, wq, wk, wv, wo, g_ffn, w1, w2,
            keys, values, lengths):
    """Extend slots ``0..n-1`` (absolute positions ``pos0 + slot``) to ``target``.

    Layer-major: every lagging slot gets layer l, in ascending position order,
    before any slot gets layer l + 1. Returns the number of (slot, layer)
    units computed, or ``-(1 + layer * 2**20 + position)`` when a KV row for
    an earlier position is missing (decoded by the caller).
    """
    units = 0
    lo = target
    for r in range(n):
        if high_water[r] < lo:
            lo = high_water[r]
    for layer in range(lo + 1, target + 1):
        li = layer - 1
        for r in range(n):
            if high_water[r] == layer - 1:
                pos = pos0 + r
                if lengths[li] != pos:
                    return -(1 + layer * 1048576 + min(lengths[li], pos))
                layer_position(states[r, layer - 1], pos, keys[li], values[li], g_attn[li],
                               wq[li], wk[li], wv[li], wo[li], g_ffn[li], w1[li], w2[li],
                               states[r, layer])
                lengths[li] = pos + 1
                high_water[r] = layer
                units += 1
    return units


@njit(cache=True)
def draft_attempt(states, high_water, slot, pos0, d_max, num_layers, alpha, tau, heads, gain,
                  g_attn, wq, wk, wv, wo, g_ffn, w1, w2, keys, values, lengths):
    """Run ``slot`` layer by layer up to ``d_max``, stopping at the first exit.

    Before computing layer l of ``slot`` every earlier slot still below l is
    extended to l (cache reuse), so attention at l sees all earlier keys.
    The exit test is the annealed top-1 confidence against ``tau``.

    Returns ``(exit_layer, token, confidence, reuse_units)``; ``exit_layer`` is
    -1 when the depth bound is reached without an exit and -2 on a KV gap.
    """
    reuse = 0
    logits = np.empty(heads.shape[2])
    start = high_water[slot] + 1
    for layer in range(start, d_max + 1):
        li = layer - 1
        for r in range(slot + 1):
            if high_water[r] == layer - 1:
                pos = pos0 + r
                if lengths[li] != pos:
                    return -2, 0, 0.0, reuse
                layer_position(states[r, layer - 1], pos, keys[li], values[li], g_attn[li],
                               wq[li], wk[li], wv[li], wo[li], g_ffn[li], w1[li], w2[li],
                               states[r, layer])
                lengths[li] = pos + 1
                high_water[r] = layer
                if r < slot:
                    reuse += 1
        head_logits(states[slot, layer], heads[li], gain, logits)
        temperature = 1.0 + alpha * (1.0 - layer / num_layers)
        token, p = top1(logits, temperature)
        if p >= tau:
            return layer, token, p, reuse
    return -1, 0, 0.0, reuse
