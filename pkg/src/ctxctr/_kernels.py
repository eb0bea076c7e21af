"""Numba kernels for FFM scoring, AdaGrad updates and whole-stream replay.

Model state is passed around as a tuple of arrays::

    (bias[1], acc_bias[1], index[cap], linear[cap], acc_linear[cap],
     latent[cap, F, k], acc_latent[cap, F, k])

and hyper-parameters as ``(learning_rate, l2, latent_scale, clip_eps,
use_interactions, seed)``. A feature vector is four parallel arrays
``fields, slots, idxs, vals``; ``slots[a] == -1`` marks a feature the model
has never allocated, whose weights read as their initial values.
"""

from __future__ import annotations

import numpy as np
from numba import njit

ADAGRAD_EPS = 1e-10

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def init_uniform(seed, idx, field, coord):
    """Uniform [0, 1) draw keyed by (seed, feature index, field, coordinate)."""
    h = mix64(seed + _GOLDEN)
    h = mix64(h ^ np.uint64(idx))
    h = mix64(h ^ np.uint64(field))
    h = mix64(h ^ np.uint64(coord))
    return np.float64(h >> _S11) * _INV53


@njit(cache=True, nogil=True)
def fill_init(latent, index, start, stop, seed, scale):
    n_fields = latent.shape[1]
    k = latent.shape[2]
    for s in range(start, stop):
        for f in range(n_fields):
            for c in range(k):
                latent[s, f, c] = init_uniform(seed, index[s], f, c) * scale


@njit(cache=True, nogil=True)
def sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def clip_proba(p, eps):
    if p < eps:
        return eps
    if p > 1.0 - eps:
        return 1.0 - eps
    return p


@njit(cache=True, nogil=True)
def _vget(latent, slot, idx, field, coord, seed, scale):
    if slot >= 0:
        return latent[slot, field, coord]
    return init_uniform(seed, idx, field, coord) * scale


@njit(cache=True, nogil=True)
def logit(state, params, fields, slots, idxs, vals, n):
    bias, _, _, linear, _, latent, _ = state
    scale = params[2]
    use_int = params[4]
    seed = params[5]
    k = latent.shape[2]
    z = bias[0]
    for a in range(n):
        if slots[a] >= 0:
            z += linear[slots[a]] * vals[a]
    if use_int:
        for a in range(n):
            fa = fields[a]
            for b in range(a + 1, n):
                fb = fields[b]
                dot = 0.0
                for c in range(k):
                    dot += _vget(latent, slots[a], idxs[a], fb, c, seed, scale) * _vget(
                        latent, slots[b], idxs[b], fa, c, seed, scale
                    )
                z += dot * vals[a] * vals[b]
    return z


@njit(cache=True, nogil=True)
def gradient(state, params, fields, slots, idxs, vals, n, label, uniq, glin, glat, gmask):
    """Fill per-coordinate gradients of logistic loss plus L2 for one example.

    Requires every slot allocated. Entries that share a slot (hash collisions
    across fields) are merged onto the first such entry, ``uniq[a]``.
    Returns ``(p, g_bias)`` with ``p`` the clipped pre-update prediction.
    """
    _, _, _, linear, _, latent, _ = state
    l2 = params[1]
    clip = params[3]
    use_int = params[4]
    k = latent.shape[2]
    n_fields = latent.shape[1]
    z = logit(state, params, fields, slots, idxs, vals, n)
    p = clip_proba(sigmoid(z), clip)
    g = p - label
    for a in range(n):
        uniq[a] = a
        for b in range(a):
            if slots[b] == slots[a]:
                uniq[a] = b
                break
        glin[a] = 0.0
        for f in range(n_fields):
            gmask[a, f] = False
            for c in range(k):
                glat[a, f, c] = 0.0
    for a in range(n):
        glin[uniq[a]] += g * vals[a]
    if use_int:
        for a in range(n):
            ua = uniq[a]
            fa = fields[a]
            for b in range(a + 1, n):
                ub = uniq[b]
                fb = fields[b]
                gx = g * vals[a] * vals[b]
                for c in range(k):
                    va = latent[slots[a], fb, c]
                    vb = latent[slots[b], fa, c]
                    glat[ua, fb, c] += gx * vb
                    glat[ub, fa, c] += gx * va
                gmask[ua, fb] = True
                gmask[ub, fa] = True
    for a in range(n):
        if uniq[a] != a:
            continue
        s = slots[a]
        glin[a] += l2 * linear[s]
        for f in range(n_fields):
            if gmask[a, f]:
                for c in range(k):
                    glat[a, f, c] += l2 * latent[s, f, c]
    return p, g


@njit(cache=True, nogil=True)
def update(state, params, fields, slots, idxs, vals, n, label, uniq, glin, glat, gmask):
    """One AdaGrad step on one example; returns the pre-update prediction."""
    bias, acc_bias, _, linear, acc_linear, latent, acc_latent = state
    lr = params[0]
    k = latent.shape[2]
    n_fields = latent.shape[1]
    p, g = gradient(state, params, fields, slots, idxs, vals, n, label, uniq, glin, glat, gmask)
    acc_bias[0] += g * g
    bias[0] -= lr * g / np.sqrt(acc_bias[0] + ADAGRAD_EPS)
    for a in range(n):
        if uniq[a] != a:
            continue
        s = slots[a]
        gw = glin[a]
        acc_linear[s] += gw * gw
        linear[s] -= lr * gw / np.sqrt(acc_linear[s] + ADAGRAD_EPS)
        for f in range(n_fields):
            if not gmask[a, f]:
                continue
            for c in range(k):
                gv = glat[a, f, c]
                acc_latent[s, f, c] += gv * gv
                latent[s, f, c] -= lr * gv / np.sqrt(acc_latent[s, f, c] + ADAGRAD_EPS)
    return p


@njit(cache=True, nogil=True)
def bucket_of(p, edges):
    """Number of edges <= p."""
    lo = 0
    hi = edges.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if edges[mid] <= p:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, nogil=True)
def replay(
    main_state,
    main_params,
    ctx_state,
    ctx_params,
    use_ctx,
    main_fields,
    main_slots,
    main_idxs,
    main_vals,
    main_n,
    ctx_fields,
    ctx_slots,
    ctx_idxs,
    ctx_vals,
    ctx_n,
    derived_field,
    bucket_slots,
    bucket_idxs,
    edges,
    labels,
    req_offsets,
    out_main,
    out_ctx,
    out_bucket,
):
    """Joint progressive-validation training over a request-grouped stream.

    Row ``i`` of the ``main_*`` matrices holds impression ``i``'s main-model
    entries before augmentation; ``ctx_*`` rows hold its context projection.
    Per request: context predicts once, every impression is scored then
    trained on by the main model, then the context model trains on each
    impression's label.
    """
    n_req = req_offsets.shape[0] - 1
    width = main_fields.shape[1] + 1
    f_m = np.empty(width, np.int64)
    s_m = np.empty(width, np.int64)
    i_m = np.empty(width, np.int64)
    v_m = np.empty(width, np.float64)
    uniq = np.empty(width, np.int64)
    glin = np.empty(width, np.float64)
    glat = np.empty((width, main_state[5].shape[1], main_state[5].shape[2]), np.float64)
    gmask = np.empty((width, main_state[5].shape[1]), np.bool_)
    cw = max(ctx_fields.shape[1], 1)
    c_uniq = np.empty(cw, np.int64)
    c_glin = np.empty(cw, np.float64)
    c_glat = np.empty((cw, ctx_state[5].shape[1], ctx_state[5].shape[2]), np.float64)
    c_gmask = np.empty((cw, ctx_state[5].shape[1]), np.bool_)
    for r in range(n_req):
        lo = req_offsets[r]
        hi = req_offsets[r + 1]
        if hi == lo:
            continue
        bucket = -1
        p_ctx = np.nan
        if use_ctx:
            nc = ctx_n[lo]
            z = logit(ctx_state, ctx_params, ctx_fields[lo], ctx_slots[lo], ctx_idxs[lo], ctx_vals[lo], nc)
            p_ctx = clip_proba(sigmoid(z), ctx_params[3])
            bucket = bucket_of(p_ctx, edges)
        for i in range(lo, hi):
            n = main_n[i]
            for a in range(n):
                f_m[a] = main_fields[i, a]
                s_m[a] = main_slots[i, a]
                i_m[a] = main_idxs[i, a]
                v_m[a] = main_vals[i, a]
            if use_ctx:
                f_m[n] = derived_field
                s_m[n] = bucket_slots[bucket]
                i_m[n] = bucket_idxs[bucket]
                v_m[n] = 1.0
                n += 1
            out_main[i] = update(main_state, main_params, f_m, s_m, i_m, v_m, n, labels[i], uniq, glin, glat, gmask)
            out_ctx[i] = p_ctx
            out_bucket[i] = bucket
        if use_ctx:
            for i in range(lo, hi):
                update(
                    ctx_state,
                    ctx_params,
                    ctx_fields[i],
                    ctx_slots[i],
                    ctx_idxs[i],
                    ctx_vals[i],
                    ctx_n[i],
                    labels[i],
                    c_uniq,
                    c_glin,
                    c_glat,
                    c_gmask,
                )


@njit(cache=True, nogil=True)
def score_rows(state, params, fields, slots, idxs, vals, n_rows, out):
    for i in range(n_rows.shape[0]):
        z = logit(state, params, fields[i], slots[i], idxs[i], vals[i], n_rows[i])
        out[i] = clip_proba(sigmoid(z), params[3])
