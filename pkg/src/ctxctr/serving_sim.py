"""Request-level replay: joint online training, scoring with context reuse, experiments."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .context_model import (
    ADD,
    BASELINE,
    MODES,
    REPLACE,
    ContextProjection,
    CtxBucketizer,
    IntegrationMode,
    augment,
    bucket_feature_index,
    bucketize,
    context_schema,
    derived_field_id,
    main_schema,
    parse_mode,
    predict_context_ctr,
    project_context,
)
from .core_model import FeatureVector, FfmModel, TrainConfig, count_flops, init_model, predict_proba
from .datagen import EncodedLog, ImpressionRecord, ScoringRequest, SyntheticConfig, generate, vectorize
from .errors import ConfigError, ReplayError, ReportError
from .evaluation import (
    MetricsAccumulator,
    MetricsReport,
    auc,
    flops_change,
    rig_from_arrays,
    rig_lift,
    rig_lift_pp,
)


CTX_LEARNING_RATE = 0.1


@dataclass
class PipelineCounters:
    requests: int = 0
    ctx_evals: int = 0
    main_evals: int = 0
    total_flops_ctx: int = 0
    total_flops_main: int = 0
    wall_time_ns: int = 0

    def merge(self, other: "PipelineCounters") -> "PipelineCounters":
        return PipelineCounters(*(a + b for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other))))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ExperimentPlan:
    variants: tuple[str, ...] = (BASELINE, REPLACE, ADD)
    replace_fields: tuple[str, ...] = ()
    warmup_fraction: float = 0.2
    eval_fraction: float = 0.5
    seeds: tuple[int, ...] = (1, 2, 3)
    day_chunks: int = 6

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(v.strip().lower() for v in self.variants))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.variants:
            raise ConfigError("plan needs at least one variant")
        for v in self.variants:
            if v not in MODES:
                raise ConfigError(f"unknown variant {v!r}")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants must be distinct")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if not 0.0 < self.eval_fraction <= 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1]")
        if self.warmup_fraction + self.eval_fraction > 1.0 + 1e-12:
            raise ConfigError("warmup_fraction + eval_fraction must not exceed 1")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if int(self.day_chunks) != self.day_chunks or self.day_chunks < 1:
            raise ConfigError("day_chunks must be a positive integer")


def default_ctx_config(main_config: TrainConfig) -> TrainConfig:
    """Plain LR on the context fields, otherwise the main model's settings.

    The larger step lets the per-value context weights reach their spread
    within a desk-scale stream, which keeps the context CTR calibrated.
    """
    return dataclasses.replace(main_config, model="lr", learning_rate=CTX_LEARNING_RATE)


def _ctx_config(main_config: TrainConfig, ctx_config: TrainConfig | None) -> TrainConfig:
    cfg = ctx_config or default_ctx_config(main_config)
    # derived and context indices share the main model's hash space
    return dataclasses.replace(cfg, hash_bits=main_config.hash_bits)


# -- serving ---------------------------------------------------------------


def score_request(
    ctx_snapshot: FfmModel | None,
    main_snapshot: FfmModel,
    req: ScoringRequest,
    mode: IntegrationMode,
    bucketizer: CtxBucketizer,
    counters: PipelineCounters | None = None,
) -> list[tuple[int, float]]:
    """Rank a request's candidates; the context model runs at most once."""
    if counters is None:
        counters = PipelineCounters()
    counters.requests += 1
    if not req.candidates:
        return []
    schema = main_snapshot.schema
    base = vectorize(req, schema, main_snapshot.hash_bits)
    derived = None
    if mode.uses_context:
        if ctx_snapshot is None:
            raise ConfigError(f"mode {mode.kind!r} needs a context model")
        ctx_fv = project_context(base[0], ContextProjection.of(schema))
        p_ctx = predict_context_ctr(ctx_snapshot, ctx_fv)
        derived = bucketize(p_ctx, bucketizer, derived_field_id(schema), main_snapshot.hash_bits)
        counters.ctx_evals += 1
        counters.total_flops_ctx += ctx_snapshot.flops(len(ctx_fv))
    scored = []
    for j, fv in enumerate(base):
        if derived is not None:
            fv = augment(fv, derived, mode)
        scored.append((j, predict_proba(main_snapshot, fv)))
        counters.main_evals += 1
        counters.total_flops_main += main_snapshot.flops(len(fv))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


def serve_requests(
    ctx_snapshot: FfmModel | None,
    main_snapshot: FfmModel,
    requests: Iterable[ScoringRequest],
    mode: IntegrationMode,
    bucketizer: CtxBucketizer,
) -> PipelineCounters:
    counters = PipelineCounters()
    t0 = time.perf_counter_ns()
    for req in requests:
        score_request(ctx_snapshot, main_snapshot, req, mode, bucketizer, counters)
    counters.wall_time_ns = time.perf_counter_ns() - t0
    return counters


# -- replay ----------------------------------------------------------------


@dataclass
class ReplayResult:
    main: FfmModel
    ctx: FfmModel | None
    mode: IntegrationMode
    accumulator: MetricsAccumulator
    predictions: np.ndarray  # pre-update main prediction per impression
    ctx_predictions: np.ndarray  # NaN under baseline
    buckets: np.ndarray  # -1 under baseline
    labels: np.ndarray
    req_offsets: np.ndarray
    n_active: np.ndarray
    counters: PipelineCounters
    warmup_start: int  # first impression recorded into the accumulator


def _slot_matrix(model: FfmModel, idx: np.ndarray) -> np.ndarray:
    if idx.size == 0:
        return np.zeros(idx.shape, np.int64)
    uniq, inv = np.unique(idx, return_inverse=True)
    return model.ensure_slots(uniq)[inv.reshape(-1)].reshape(idx.shape)


def _check_ts(ts: Sequence[int]) -> None:
    for i in range(1, len(ts)):
        if ts[i] < ts[i - 1]:
            raise ReplayError(f"impression {i}: timestamp {ts[i]} precedes {ts[i - 1]}")


def request_boundary(req_offsets: np.ndarray, fraction: float) -> int:
    """First impression of the request at ``fraction`` of the stream."""
    n_req = len(req_offsets) - 1
    return int(req_offsets[int(math.floor(n_req * fraction))])


def replay_train(
    log: EncodedLog | Iterable[ImpressionRecord],
    mode: IntegrationMode,
    main_config: TrainConfig,
    ctx_config: TrainConfig | None = None,
    bucketizer: CtxBucketizer | None = None,
    warmup_fraction: float = 0.2,
    strict_ts: bool = False,
) -> ReplayResult:
    """Progressive-validation training of the main (and context) model over a log.

    Per request the context model predicts once on the shared context, every
    impression is scored by the main model before it trains on that
    impression, and the context model then trains once per impression. No
    prediction for an impression depends on its own label.
    """
    if not 0.0 <= warmup_fraction < 1.0:
        raise ConfigError("warmup_fraction must lie in [0, 1)")
    if not isinstance(log, EncodedLog):
        records = list(log)
        if strict_ts:
            _check_ts([r.ts for r in records])
        log = EncodedLog.from_records(records, main_config.hash_bits)
    if log.hash_bits != main_config.hash_bits:
        raise ConfigError("log was hashed with a different hash_bits than the main model")
    bucketizer = bucketizer or CtxBucketizer.equal_width()
    t0 = time.perf_counter_ns()

    schema = main_schema(log.context_fields, log.item_fields, mode)
    main = init_model(schema, main_config)
    nc, ni = len(log.context_fields), len(log.item_fields)
    n = len(log)

    keep_ctx = [j for j in range(nc) if j not in mode.replaced_field_ids]
    main_fields = np.array(keep_ctx + list(range(nc, nc + ni)), np.int64)
    main_idx = np.concatenate([log.ctx_idx[:, keep_ctx], log.item_idx], axis=1).astype(np.int64)
    width = main_idx.shape[1]
    main_slots = _slot_matrix(main, main_idx)
    main_f = np.broadcast_to(main_fields, (n, width)).copy()
    main_v = np.ones((n, width))
    main_n = np.full(n, width, np.int64)

    cschema = context_schema(schema)
    cconfig = _ctx_config(main_config, ctx_config)
    ctx = init_model(cschema, cconfig) if mode.uses_context else None
    dummy = ctx or init_model(cschema, cconfig)
    ctx_idx = log.ctx_idx.astype(np.int64)
    ctx_slots = _slot_matrix(ctx, ctx_idx) if ctx is not None else np.zeros_like(ctx_idx)
    ctx_f = np.broadcast_to(np.arange(nc, dtype=np.int64), (n, nc)).copy()
    ctx_v = np.ones((n, nc))
    ctx_n = np.full(n, nc, np.int64)

    edges = np.array(bucketizer.edges, float)
    if mode.uses_context:
        dfield = derived_field_id(schema)
        bucket_idx = np.array(
            [bucket_feature_index(b, main_config.hash_bits) for b in range(bucketizer.num_buckets)], np.int64
        )
        bucket_slots = main.ensure_slots(bucket_idx)
    else:
        dfield = -1
        bucket_idx = np.zeros(1, np.int64)
        bucket_slots = np.zeros(1, np.int64)

    preds = np.empty(n)
    ctx_preds = np.full(n, np.nan)
    buckets = np.full(n, -1, np.int64)
    _kernels.replay(
        main.state,
        main.params,
        dummy.state,
        dummy.params,
        mode.uses_context,
        main_f,
        main_slots,
        main_idx,
        main_v,
        main_n,
        ctx_f,
        ctx_slots,
        ctx_idx,
        ctx_v,
        ctx_n,
        dfield,
        bucket_slots,
        bucket_idx,
        edges,
        log.labels.astype(np.float64),
        log.req_offsets.astype(np.int64),
        preds,
        ctx_preds,
        buckets,
    )
    main.update_count += n
    non_empty = int(np.count_nonzero(np.diff(log.req_offsets)))
    n_active = main_n + (1 if mode.uses_context else 0)
    counters = PipelineCounters(requests=log.n_requests, main_evals=n)
    counters.total_flops_main = sum(main.flops(int(a)) * int(c) for a, c in zip(*np.unique(n_active, return_counts=True)))
    if ctx is not None:
        ctx.update_count += n
        counters.ctx_evals = non_empty
        counters.total_flops_ctx = non_empty * ctx.flops(nc)

    warm = request_boundary(log.req_offsets, warmup_fraction)
    acc = MetricsAccumulator(main_config.clip_eps)
    acc.add_batch(log.labels[warm:], preds[warm:])
    counters.wall_time_ns = time.perf_counter_ns() - t0
    return ReplayResult(
        main=main,
        ctx=ctx,
        mode=mode,
        accumulator=acc,
        predictions=preds,
        ctx_predictions=ctx_preds,
        buckets=buckets,
        labels=log.labels,
        req_offsets=log.req_offsets,
        n_active=n_active,
        counters=counters,
        warmup_start=warm,
    )


def score_log(main: FfmModel, ctx: FfmModel | None, log: EncodedLog, mode: IntegrationMode, bucketizer: CtxBucketizer) -> np.ndarray:
    """Predictions for every impression without updating either model."""
    requests = _requests_from_encoded(log)
    out = np.empty(len(log))
    schema = main.schema
    for (lo, hi), (ctx_fv, base) in requests:
        derived = None
        if mode.uses_context:
            p_ctx = predict_context_ctr(ctx, ctx_fv)
            derived = bucketize(p_ctx, bucketizer, derived_field_id(schema), main.hash_bits)
        for i, fv in zip(range(lo, hi), base):
            out[i] = predict_proba(main, augment(fv, derived, mode) if derived else fv)
    return out


def _requests_from_encoded(log: EncodedLog):
    nc, ni = len(log.context_fields), len(log.item_fields)
    for r in range(log.n_requests):
        lo, hi = int(log.req_offsets[r]), int(log.req_offsets[r + 1])
        if lo == hi:
            continue
        ctx_entries = [(j, int(log.ctx_idx[lo, j])) for j in range(nc)]
        base = [
            FeatureVector(ctx_entries + [(nc + j, int(log.item_idx[i, j])) for j in range(ni)]) for i in range(lo, hi)
        ]
        yield (lo, hi), (FeatureVector(ctx_entries), base)


# -- experiments -----------------------------------------------------------


@dataclass
class VariantRun:
    seed: int
    mode: str
    rig: float
    auc: float
    log_loss: float
    gamma: float
    n: int
    flops_per_ad: float
    flops_per_request: float
    counters: PipelineCounters
    eval_labels: np.ndarray = field(repr=False)
    eval_preds: np.ndarray = field(repr=False)


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    runs: dict  # (seed, mode) -> VariantRun
    reports: list[MetricsReport]

    def run(self, seed: int, mode: str) -> VariantRun:
        return self.runs[(seed, mode)]

    def report(self, mode: str) -> MetricsReport:
        for r in self.reports:
            if r.mode == mode:
                return r
        raise KeyError(mode)


def _run_variant(enc: EncodedLog, seed: int, name: str, plan, main_config, ctx_config, bucketizer) -> VariantRun:
    schema = enc.schema()
    mode = parse_mode(name, schema, plan.replace_fields)
    res = replay_train(enc, mode, main_config, ctx_config, bucketizer, plan.warmup_fraction)
    start = request_boundary(enc.req_offsets, max(plan.warmup_fraction, 1.0 - plan.eval_fraction))
    labels = enc.labels[start:]
    preds = res.predictions[start:]
    acc = MetricsAccumulator(main_config.clip_eps)
    acc.add_batch(labels, preds)
    c = res.counters
    non_empty = max(int(np.count_nonzero(np.diff(enc.req_offsets))), 1)
    return VariantRun(
        seed=seed,
        mode=name,
        rig=acc.rig(),
        auc=auc(acc),
        log_loss=acc.log_loss,
        gamma=acc.gamma,
        n=acc.n,
        flops_per_ad=c.total_flops_main / max(c.main_evals, 1),
        flops_per_request=(c.total_flops_main + c.total_flops_ctx) / non_empty,
        counters=c,
        eval_labels=labels,
        eval_preds=preds,
    )


def _run_seed(seed, plan, synth_config, main_config, ctx_config, bucketizer) -> list[VariantRun]:
    data = generate(dataclasses.replace(synth_config, seed=seed))
    enc = data.encode(main_config.hash_bits)
    return [_run_variant(enc, seed, v, plan, main_config, ctx_config, bucketizer) for v in plan.variants]


def run_experiment(
    plan: ExperimentPlan,
    synth_config: SyntheticConfig,
    main_config: TrainConfig,
    ctx_config: TrainConfig | None = None,
    bucketizer: CtxBucketizer | None = None,
    threads: int = 1,
) -> ExperimentResult:
    """One generated log per seed, every variant replayed on it, lifts against that seed's baseline."""
    bucketizer = bucketizer or CtxBucketizer.equal_width()
    args = (plan, synth_config, main_config, ctx_config, bucketizer)
    if threads > 1 and len(plan.seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_seed = list(pool.map(lambda s: _run_seed(s, *args), plan.seeds))
    else:
        per_seed = [_run_seed(s, *args) for s in plan.seeds]
    runs = {(r.seed, r.mode): r for rs in per_seed for r in rs}
    return ExperimentResult(plan, runs, _reports(plan, runs))


def _reports(plan: ExperimentPlan, runs: dict) -> list[MetricsReport]:
    base_name = BASELINE if BASELINE in plan.variants else plan.variants[0]
    reports = []
    for v in plan.variants:
        rs = [runs[(s, v)] for s in plan.seeds]
        bs = [runs[(s, base_name)] for s in plan.seeds]
        lifts = [rig_lift(r.rig, b.rig) for r, b in zip(rs, bs)]
        pps = [rig_lift_pp(r.rig, b.rig) for r, b in zip(rs, bs)]
        ad = float(np.mean([r.flops_per_ad for r in rs]))
        req = float(np.mean([r.flops_per_request for r in rs]))
        base_ad = float(np.mean([b.flops_per_ad for b in bs]))
        base_req = float(np.mean([b.flops_per_request for b in bs]))
        reports.append(
            MetricsReport(
                mode=v,
                log_loss=float(np.mean([r.log_loss for r in rs])),
                rig=float(np.mean([r.rig for r in rs])),
                auc=float(np.mean([r.auc for r in rs])),
                n=int(sum(r.n for r in rs)),
                gamma=float(np.mean([r.gamma for r in rs])),
                flops_per_ad=ad,
                flops_per_request=req,
                rig_lift_pct=float(np.mean(lifts)),
                rig_lift_pp=float(np.mean(pps)),
                flops_change_pct=flops_change(ad, base_ad),
                flops_change_request_pct=flops_change(req, base_req),
                rig_lift_min=float(min(lifts)),
                rig_lift_max=float(max(lifts)),
                lift_flagged=any(b.rig == 0 for b in bs),
                per_seed=[{"seed": r.seed, "rig": r.rig, "rig_lift_pct": l} for r, l in zip(rs, lifts)],
            )
        )
    return reports


@dataclass
class DailyLiftReport:
    variant: str
    rows: list[tuple[int, float, int]]  # (chunk_index, lift_pct, impressions)
    mean: float
    weighted_mean: float
    overall: float

    def to_csv(self) -> str:
        lines = ["chunk_index,lift_pct,n_impressions"]
        for i, lift, n in self.rows:
            lines.append(f"{i},{lift:.9g},{n}")
        lines.append(f"mean,{self.mean:.9g},{sum(r[2] for r in self.rows)}")
        return "\n".join(lines) + "\n"


def _lift_variant(plan: ExperimentPlan) -> str:
    if ADD in plan.variants:
        return ADD
    others = [v for v in plan.variants if v != BASELINE]
    return others[-1] if others else plan.variants[0]


def daily_lift_report(result: ExperimentResult, day_chunks: int | None = None, variant: str | None = None) -> DailyLiftReport:
    """Per-chunk RIG lift of ``variant`` against the baseline over the evaluation slice.

    Chunks are equal-size contiguous pieces in stream order; lifts are taken
    within each seed and then averaged over seeds.
    """
    plan = result.plan
    d = plan.day_chunks if day_chunks is None else day_chunks
    if d < 1:
        raise ReportError("day_chunks must be >= 1")
    variant = variant or _lift_variant(plan)
    base_name = BASELINE if BASELINE in plan.variants else plan.variants[0]
    per_chunk = np.zeros(d)
    sizes = None
    for s in plan.seeds:
        vr, br = result.run(s, variant), result.run(s, base_name)
        if len(vr.eval_labels) < d:
            raise ReportError(f"evaluation slice of {len(vr.eval_labels)} impressions cannot fill {d} chunks")
        bounds = np.array_split(np.arange(len(vr.eval_labels)), d)
        for c, ix in enumerate(bounds):
            if ix.size == 0:
                raise ReportError(f"chunk {c} is empty")
            lab = vr.eval_labels[ix]
            try:
                rv = rig_from_arrays(lab, vr.eval_preds[ix])
                rb = rig_from_arrays(lab, br.eval_preds[ix])
            except ValueError as exc:
                raise ReportError(f"chunk {c}: {exc}") from exc
            per_chunk[c] += rig_lift(rv, rb)
        sizes = [int(ix.size) for ix in bounds]
    per_chunk /= len(plan.seeds)
    rows = [(c, float(per_chunk[c]), sizes[c]) for c in range(d)]
    w = np.array(sizes, float)
    return DailyLiftReport(
        variant=variant,
        rows=rows,
        mean=float(per_chunk.mean()),
        weighted_mean=float((per_chunk * w).sum() / w.sum()),
        overall=float(result.report(variant).rig_lift_pct),
    )


def counters_json(result: ExperimentResult) -> str:
    out: dict = {}
    for (seed, mode), run in sorted(result.runs.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        out.setdefault(mode, {})[str(seed)] = run.counters.to_dict()
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
