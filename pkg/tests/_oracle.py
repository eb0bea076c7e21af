"""Independent pure-Python references used by the tests.

Nothing here imports the numba kernels: latent initialisation, the FFM
logit and the loss are re-derived from their definitions so the compiled
code can be checked against them.
"""

from __future__ import annotations

import math

import numpy as np

from ctxctr.context_model import (
    ContextProjection,
    augment,
    bucketize,
    context_schema,
    derived_field_id,
    main_schema,
    predict_context_ctr,
    project_context,
)
from ctxctr.core_model import FeatureVector, init_model, update

M64 = (1 << 64) - 1


def splitmix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def init_uniform(seed: int, idx: int, field: int, coord: int) -> float:
    h = splitmix((seed + 0x9E3779B97F4A7C15) & M64)
    h = splitmix(h ^ idx)
    h = splitmix(h ^ field)
    h = splitmix(h ^ coord)
    return (h >> 11) / float(1 << 53)


def init_latent(seed: int, idx: int, field: int, k: int, init_scale: float) -> list[float]:
    return [init_uniform(seed, idx, field, c) * init_scale / math.sqrt(k) for c in range(k)]


def ffm_logit(bias, w: dict, v, entries) -> float:
    """``v(idx, field)`` returns a latent vector; ``w`` maps idx -> weight."""
    z = bias
    for _, i, x in entries:
        z += w.get(i, 0.0) * x
    for a in range(len(entries)):
        fa, ia, xa = entries[a]
        for b in range(a + 1, len(entries)):
            fb, ib, xb = entries[b]
            z += sum(p * q for p, q in zip(v(ia, fb), v(ib, fa))) * xa * xb
    return z


def logloss(label: int, p: float) -> float:
    return -(label * math.log(p) + (1 - label) * math.log(1 - p))


def brute_rig(labels, preds, eps=1e-6) -> float:
    n = len(labels)
    loss = 0.0
    for y, p in zip(labels, preds):
        p = min(max(p, eps), 1 - eps)
        loss += logloss(int(y), p)
    g = sum(labels) / n
    h = -g * math.log(g) - (1 - g) * math.log(1 - g)
    return 1 - (loss / n) / h


def brute_auc(labels, scores) -> float:
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def reference_replay(log, mode, main_cfg, ctx_cfg, bucketizer):
    """Joint replay through the per-example public API, one request at a time."""
    schema = main_schema(log.context_fields, log.item_fields, mode)
    main = init_model(schema, main_cfg)
    ctx = init_model(context_schema(schema), ctx_cfg) if mode.uses_context else None
    nc, ni = len(log.context_fields), len(log.item_fields)
    preds = np.empty(len(log))
    ctx_preds = np.full(len(log), np.nan)
    for r in range(log.n_requests):
        lo, hi = int(log.req_offsets[r]), int(log.req_offsets[r + 1])
        if lo == hi:
            continue
        ctx_entries = [(j, int(log.ctx_idx[lo, j])) for j in range(nc)]
        derived = None
        if ctx is not None:
            cfv = project_context(FeatureVector(ctx_entries), ContextProjection.of(schema))
            p_ctx = predict_context_ctr(ctx, cfv)
            derived = bucketize(p_ctx, bucketizer, derived_field_id(schema), main_cfg.hash_bits)
        for i in range(lo, hi):
            fv = FeatureVector(ctx_entries + [(nc + j, int(log.item_idx[i, j])) for j in range(ni)])
            if derived is not None:
                fv = augment(fv, derived, mode)
                ctx_preds[i] = derived.raw_p
            preds[i] = update(main, fv, int(log.labels[i]))
        if ctx is not None:
            for i in range(lo, hi):
                update(ctx, FeatureVector(ctx_entries), int(log.labels[i]))
    return preds, ctx_preds, main, ctx


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def fd_gradient_error(seed: int, h: float = 1e-5) -> float:
    """Largest relative error between ``gradient`` and central differences.

    Builds a random small FFM instance (up to 4 fields, k up to 3, up to 6
    active features, possibly colliding indices), writes the same weights
    into a model and into plain dicts, and differentiates a pure-Python loss.
    """
    from ctxctr.core_model import FieldSchema, TrainConfig, gradient

    rng = np.random.default_rng(seed)
    n_fields = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    l2 = float(rng.choice([0.0, 1e-3, 0.05]))
    n_feat = int(rng.integers(1, 7))
    pairs = {(int(rng.integers(0, n_fields)), int(rng.integers(0, 6))) for _ in range(n_feat)}
    entries = sorted((f, i, float(rng.uniform(0.5, 1.5))) for f, i in pairs)
    label = int(rng.integers(0, 2))

    schema = FieldSchema.build([f"f{j}" for j in range(n_fields)])
    model = init_model(schema, TrainConfig(k=k, l2=l2, hash_bits=8))
    bias = float(rng.uniform(-0.5, 0.5))
    model.bias = bias
    idxs = sorted({i for _, i, _ in entries})
    w = {i: float(rng.uniform(-0.5, 0.5)) for i in idxs}
    V = {(i, f): rng.uniform(-0.5, 0.5, k) for i in idxs for f in range(n_fields)}
    for i in idxs:
        model.set_linear(i, w[i])
        for f in range(n_fields):
            model.set_latent(i, f, V[(i, f)])
    touched = set()
    for a in range(len(entries)):
        for b in range(a + 1, len(entries)):
            touched.add((entries[a][1], entries[b][0]))
            touched.add((entries[b][1], entries[a][0]))

    def loss(bias_, w_, V_):
        z = ffm_logit(bias_, w_, lambda i, f: V_[(i, f)], entries)
        reg = sum(x * x for x in w_.values()) + sum(float(V_[t] @ V_[t]) for t in touched)
        return logloss(label, _sigmoid(z)) + 0.5 * l2 * reg

    g = gradient(model, FeatureVector(entries), label)
    expected_keys = {"bias"} | {("w", i) for i in idxs} | {("v", i, f) for i, f in touched}
    if set(g) != expected_keys:
        return math.inf

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-6)

    worst = rel(g["bias"], (loss(bias + h, w, V) - loss(bias - h, w, V)) / (2 * h))
    for i in idxs:
        up, dn = dict(w), dict(w)
        up[i] += h
        dn[i] -= h
        worst = max(worst, rel(g[("w", i)], (loss(bias, up, V) - loss(bias, dn, V)) / (2 * h)))
    for i, f in touched:
        for c in range(k):
            up, dn = dict(V), dict(V)
            up[(i, f)] = V[(i, f)].copy()
            dn[(i, f)] = V[(i, f)].copy()
            up[(i, f)][c] += h
            dn[(i, f)][c] -= h
            num = (loss(bias, w, up) - loss(bias, w, dn)) / (2 * h)
            worst = max(worst, rel(g[("v", i, f)][c], num))
    return worst
