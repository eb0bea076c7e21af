"""Synthetic impression logs with planted context, item and context x item effects.

The true logit of showing item ``i`` in context ``c`` is::

    mu + sum_f a_f(c_f) + sum_g b_g(i_g) + beta_int * <sum_f u_f(c_f), sum_g v_g(i_g)>

with per-value Gaussian effects ``a``, ``b`` and per-value random unit
4-vectors ``u``, ``v``. ``mu`` is bisected so that a pilot sample hits the
requested base CTR.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core_model import CONTEXT, ITEM, FeatureVector, FieldSchema
from .errors import ConfigError, GenerationError, LogParseError, SchemaMismatchError

log = logging.getLogger(__name__)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
UNIT_SEP = b"\x1f"

INTERACTION_DIM = 4
PILOT_SIZE = 10_000
CALIBRATION_TOL = 0.005
MAX_BISECTION_STEPS = 100
TS_START_MS = 1_700_000_000_000
TS_STEP_MS = 250

LOG_KEYS = ("ts", "request_id", "context", "item", "click", "true_p")


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def feature_index(field_name: str, value: str, hash_bits: int) -> int:
    """Hashed index of ``value`` within ``field_name``. Collisions are accepted."""
    key = field_name.encode("utf-8") + UNIT_SEP + value.encode("utf-8")
    return fnv1a64(key) & ((1 << hash_bits) - 1)


@dataclass(frozen=True)
class SyntheticConfig:
    n_context_fields: int = 4
    n_item_fields: int = 3
    cardinality: int = 200
    beta_ctx: float = 0.8
    beta_item: float = 0.8
    beta_int: float = 0.3
    base_ctr: float = 0.2
    n_requests: int = 200_000
    candidates_per_request: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("n_context_fields", "n_item_fields", "cardinality", "n_requests", "candidates_per_request"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("beta_ctx", "beta_item", "beta_int"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.base_ctr < 1:
            raise ConfigError("base_ctr must lie strictly inside (0, 1)")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def context_fields(self) -> tuple[str, ...]:
        return tuple(f"ctx{j}" for j in range(self.n_context_fields))

    @property
    def item_fields(self) -> tuple[str, ...]:
        return tuple(f"item{j}" for j in range(self.n_item_fields))


@dataclass
class ImpressionRecord:
    ts: int
    request_id: str
    context: dict[str, str]
    item: dict[str, str]
    click: int
    true_p: float | None = None

    def to_json(self) -> str:
        obj = {"ts": self.ts, "request_id": self.request_id, "context": self.context, "item": self.item, "click": self.click}
        if self.true_p is not None:
            obj["true_p"] = self.true_p
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


@dataclass
class ScoringRequest:
    request_id: str
    context: dict[str, str]
    candidates: list[dict[str, str]] = field(default_factory=list)


class SyntheticLog:
    """Generated log held as integer value ids; iterating yields records."""

    def __init__(self, config: SyntheticConfig, ctx_ids, item_ids, clicks, true_p, mu: float):
        self.config = config
        self.ctx_ids = ctx_ids  # (n_requests, n_context_fields)
        self.item_ids = item_ids  # (n_impressions, n_item_fields)
        self.clicks = clicks
        self.true_p = true_p
        self.mu = mu

    def __len__(self) -> int:
        return len(self.clicks)

    @property
    def n_requests(self) -> int:
        return self.ctx_ids.shape[0]

    @property
    def request_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_requests), self.config.candidates_per_request)

    def __iter__(self) -> Iterator[ImpressionRecord]:
        cfg = self.config
        cnames, inames = cfg.context_fields, cfg.item_fields
        c = cfg.candidates_per_request
        ctx_ids = self.ctx_ids.tolist()
        item_ids = self.item_ids.tolist()
        clicks = self.clicks.tolist()
        true_p = self.true_p.tolist()
        for r in range(self.n_requests):
            context = {n: f"v{v}" for n, v in zip(cnames, ctx_ids[r])}
            rid = f"r{r:09d}"
            ts = TS_START_MS + r * TS_STEP_MS
            for j in range(r * c, (r + 1) * c):
                yield ImpressionRecord(
                    ts=ts,
                    request_id=rid,
                    context=dict(context),
                    item={n: f"v{v}" for n, v in zip(inames, item_ids[j])},
                    click=clicks[j],
                    true_p=true_p[j],
                )

    def schema(self, derived: str | None = None) -> FieldSchema:
        return FieldSchema.build(self.config.context_fields, self.config.item_fields, derived)

    def encode(self, hash_bits: int) -> "EncodedLog":
        cfg = self.config
        values = [f"v{v}" for v in range(cfg.cardinality)]

        def table(name):
            return np.array([feature_index(name, v, hash_bits) for v in values], np.int64)

        ctx = np.stack([table(n)[self.ctx_ids[:, j]] for j, n in enumerate(cfg.context_fields)], axis=1)
        item = np.stack([table(n)[self.item_ids[:, j]] for j, n in enumerate(cfg.item_fields)], axis=1)
        offsets = np.arange(self.n_requests + 1, dtype=np.int64) * cfg.candidates_per_request
        return EncodedLog(
            context_fields=cfg.context_fields,
            item_fields=cfg.item_fields,
            hash_bits=hash_bits,
            ctx_idx=np.repeat(ctx, cfg.candidates_per_request, axis=0),
            item_idx=item,
            labels=self.clicks.astype(np.float64),
            req_offsets=offsets,
            true_p=self.true_p.copy(),
        )


@dataclass
class EncodedLog:
    """Hashed, request-grouped arrays ready for replay."""

    context_fields: tuple[str, ...]
    item_fields: tuple[str, ...]
    hash_bits: int
    ctx_idx: np.ndarray  # (n_impressions, n_context_fields)
    item_idx: np.ndarray  # (n_impressions, n_item_fields)
    labels: np.ndarray
    req_offsets: np.ndarray  # (n_requests + 1,)
    true_p: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_requests(self) -> int:
        return len(self.req_offsets) - 1

    def schema(self, derived: str | None = None) -> FieldSchema:
        return FieldSchema.build(self.context_fields, self.item_fields, derived)

    @classmethod
    def from_records(cls, records: Iterable[ImpressionRecord], hash_bits: int, schema: FieldSchema | None = None) -> "EncodedLog":
        records = list(records)
        if schema is None:
            if not records:
                raise SchemaMismatchError("cannot infer a schema from an empty log")
            schema = FieldSchema.build(tuple(records[0].context), tuple(records[0].item))
        cnames, inames = schema.names_of(CONTEXT), schema.names_of(ITEM)
        cache: dict[tuple[str, str], int] = {}

        def idx(name, value):
            key = (name, value)
            i = cache.get(key)
            if i is None:
                i = cache[key] = feature_index(name, value, hash_bits)
            return i

        n = len(records)
        ctx = np.zeros((n, len(cnames)), np.int64)
        item = np.zeros((n, len(inames)), np.int64)
        offsets = [0]
        prev = None
        for r, rec in enumerate(records):
            if set(rec.context) != set(cnames) or set(rec.item) != set(inames):
                raise SchemaMismatchError(f"record {r} fields do not match the schema")
            ctx[r] = [idx(nm, rec.context[nm]) for nm in cnames]
            item[r] = [idx(nm, rec.item[nm]) for nm in inames]
            if prev is not None and rec.request_id != prev:
                offsets.append(r)
            prev = rec.request_id
        if n:
            offsets.append(n)
        true_p = None
        if n and all(rec.true_p is not None for rec in records):
            true_p = np.array([rec.true_p for rec in records])
        return cls(
            context_fields=cnames,
            item_fields=inames,
            hash_bits=hash_bits,
            ctx_idx=ctx,
            item_idx=item,
            labels=np.array([rec.click for rec in records], np.float64),
            req_offsets=np.array(offsets, np.int64),
            true_p=true_p,
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _unit_vectors(rng, n):
    v = rng.standard_normal((n, INTERACTION_DIM))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class _Effects:
    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        card = cfg.cardinality
        self.cfg = cfg
        self.a = rng.normal(0.0, 1.0, (cfg.n_context_fields, card)) * cfg.beta_ctx
        self.b = rng.normal(0.0, 1.0, (cfg.n_item_fields, card)) * cfg.beta_item
        self.u = np.stack([_unit_vectors(rng, card) for _ in range(cfg.n_context_fields)])
        self.v = np.stack([_unit_vectors(rng, card) for _ in range(cfg.n_item_fields)])

    def logit(self, ctx_ids, item_ids):
        """Logit without the intercept for aligned rows of context and item ids."""
        cf = np.arange(self.cfg.n_context_fields)
        itf = np.arange(self.cfg.n_item_fields)
        z = self.a[cf, ctx_ids].sum(axis=1) + self.b[itf, item_ids].sum(axis=1)
        if self.cfg.beta_int > 0:
            uc = self.u[cf, ctx_ids].sum(axis=1)
            vi = self.v[itf, item_ids].sum(axis=1)
            z = z + self.cfg.beta_int * np.einsum("nd,nd->n", uc, vi)
        return z


def _calibrate_intercept(z_pilot: np.ndarray, target: float) -> float:
    lo, hi = -50.0, 50.0
    mu = 0.0
    for _ in range(MAX_BISECTION_STEPS):
        mu = 0.5 * (lo + hi)
        m = _sigmoid(mu + z_pilot).mean()
        if m < target:
            lo = mu
        else:
            hi = mu
        if hi - lo < 1e-12:
            break
    if abs(_sigmoid(mu + z_pilot).mean() - target) > CALIBRATION_TOL:
        raise GenerationError(f"could not calibrate intercept to base CTR {target}")
    return mu


def generate(config: SyntheticConfig) -> SyntheticLog:
    """Draw a request-grouped impression log; fully determined by ``config.seed``."""
    ss = np.random.SeedSequence(int(config.seed) & 0xFFFFFFFFFFFFFFFF)
    effects_ss, pilot_ss, draw_ss = ss.spawn(3)
    effects = _Effects(config, np.random.default_rng(effects_ss))
    card = config.cardinality
    nc, ni = config.n_context_fields, config.n_item_fields

    pilot = np.random.default_rng(pilot_ss)
    z_pilot = effects.logit(pilot.integers(0, card, (PILOT_SIZE, nc)), pilot.integers(0, card, (PILOT_SIZE, ni)))
    mu = _calibrate_intercept(z_pilot, config.base_ctr)

    rng = np.random.default_rng(draw_ss)
    n_req = config.n_requests
    c = config.candidates_per_request
    ctx_ids = rng.integers(0, card, (n_req, nc))
    item_ids = rng.integers(0, card, (n_req * c, ni))
    z = mu + effects.logit(np.repeat(ctx_ids, c, axis=0), item_ids)
    true_p = _sigmoid(z)
    clicks = (rng.random(n_req * c) < true_p).astype(np.int64)
    return SyntheticLog(config, ctx_ids, item_ids, clicks, true_p, mu)


# -- log files -------------------------------------------------------------


def _parse_record(obj, line_no: int) -> ImpressionRecord:
    if not isinstance(obj, dict):
        raise LogParseError("expected a JSON object", line_no)
    extra = set(obj) - set(LOG_KEYS)
    if extra:
        raise LogParseError(f"unknown keys {sorted(extra)}", line_no)
    for key in LOG_KEYS[:5]:
        if key not in obj:
            raise LogParseError(f"missing key {key!r}", line_no)
    ts, rid, click = obj["ts"], obj["request_id"], obj["click"]
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise LogParseError("ts must be an integer", line_no)
    if not isinstance(rid, str):
        raise LogParseError("request_id must be a string", line_no)
    if isinstance(click, bool) or click not in (0, 1):
        raise LogParseError(f"click must be 0 or 1, got {click!r}", line_no)
    for key in ("context", "item"):
        m = obj[key]
        if not isinstance(m, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in m.items()):
            raise LogParseError(f"{key} must map strings to strings", line_no)
    true_p = obj.get("true_p")
    if true_p is not None:
        if isinstance(true_p, bool) or not isinstance(true_p, (int, float)) or not 0 <= true_p <= 1:
            raise LogParseError("true_p must be a probability", line_no)
        true_p = float(true_p)
    return ImpressionRecord(ts, rid, obj["context"], obj["item"], int(click), true_p)


def read_log(path: str | Path, strict: bool = False) -> Iterator[ImpressionRecord]:
    """Stream records from a JSONL log.

    Timestamps going backwards raise in strict mode and are logged otherwise.
    """
    last_ts = None
    with open(path, encoding="utf-8", newline="\n") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(f"malformed JSON: {exc.msg}", line_no) from None
            rec = _parse_record(obj, line_no)
            if last_ts is not None and rec.ts < last_ts:
                if strict:
                    raise LogParseError(f"timestamp {rec.ts} precedes {last_ts}", line_no)
                log.warning("line %d: timestamp %d precedes %d", line_no, rec.ts, last_ts)
            last_ts = rec.ts
            yield rec


def write_log(records: Iterable[ImpressionRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
            n += 1
    return n


def group_requests(records: Iterable[ImpressionRecord]) -> Iterator[ScoringRequest]:
    """Consecutive records sharing a request_id form one request."""
    current = None
    for rec in records:
        if current is None or rec.request_id != current.request_id:
            if current is not None:
                yield current
            current = ScoringRequest(rec.request_id, dict(rec.context))
        current.candidates.append(dict(rec.item))
    if current is not None:
        yield current


def vectorize(obj, schema: FieldSchema, hash_bits: int):
    """Hash a record (or each candidate of a request) into FeatureVectors.

    Records yield one vector over context and item fields; requests yield one
    vector per candidate.
    """
    if isinstance(obj, ScoringRequest):
        ctx = _entries(obj.context, schema, hash_bits)
        return [FeatureVector(ctx + _entries(cand, schema, hash_bits)) for cand in obj.candidates]
    return FeatureVector(_entries(obj.context, schema, hash_bits) + _entries(obj.item, schema, hash_bits))


def _entries(values: dict[str, str], schema: FieldSchema, hash_bits: int) -> list:
    out = []
    for name, value in values.items():
        fd = schema.by_name(name)
        out.append((fd.field_id, feature_index(name, value, hash_bits), 1.0))
    return out


def infer_schema(records: Sequence[ImpressionRecord], derived: str | None = None) -> FieldSchema:
    if not records:
        raise SchemaMismatchError("cannot infer a schema from an empty log")
    return FieldSchema.build(tuple(records[0].context), tuple(records[0].item), derived)
