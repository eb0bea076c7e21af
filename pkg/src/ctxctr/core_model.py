"""Field-aware factorization machine with logistic output and AdaGrad updates.

The logit of a feature vector ``x`` is::

    bias + sum_j w_j x_j + sum_{j1 < j2} <v[j1, field(j2)], v[j2, field(j1)]> x_j1 x_j2

Weights live in slot-indexed arrays that grow on demand; a feature index is
given a slot the first time it is trained on. Latent vectors of features
that were never trained on read as the value their lazy initialisation would
produce, so prediction never mutates the model.
"""

from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels
from .errors import CheckpointError, ConfigError, InputError, SchemaMismatchError

CONTEXT = "context"
ITEM = "item"
DERIVED = "derived"
FIELD_KINDS = (CONTEXT, ITEM, DERIVED)

CHECKPOINT_FORMAT = "ctxctr-ffm"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldDef:
    field_id: int
    name: str
    kind: str


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple[FieldDef, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        ids = [f.field_id for f in self.fields]
        if ids != list(range(len(ids))):
            raise ConfigError(f"field ids must be dense 0..F-1 in order, got {ids}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("field names must be unique")
        for f in self.fields:
            if f.kind not in FIELD_KINDS:
                raise ConfigError(f"unknown field kind {f.kind!r} for {f.name!r}")
        if sum(f.kind == DERIVED for f in self.fields) > 1:
            raise ConfigError("at most one derived field is allowed")

    @classmethod
    def build(cls, context: Sequence[str], item: Sequence[str] = (), derived: str | None = None) -> "FieldSchema":
        """Context fields first, then item fields, then the optional derived field."""
        defs = [(n, CONTEXT) for n in context] + [(n, ITEM) for n in item]
        if derived is not None:
            defs.append((derived, DERIVED))
        return cls(tuple(FieldDef(i, n, k) for i, (n, k) in enumerate(defs)))

    def __len__(self) -> int:
        return len(self.fields)

    def ids_of(self, kind: str) -> tuple[int, ...]:
        return tuple(f.field_id for f in self.fields if f.kind == kind)

    def names_of(self, kind: str) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields if f.kind == kind)

    def by_name(self, name: str) -> FieldDef:
        for f in self.fields:
            if f.name == name:
                return f
        raise SchemaMismatchError(f"unknown field {name!r}")

    @property
    def derived_field(self) -> FieldDef | None:
        for f in self.fields:
            if f.kind == DERIVED:
                return f
        return None

    def validate_main(self) -> None:
        if not self.ids_of(CONTEXT) or not self.ids_of(ITEM):
            raise ConfigError("a main-model schema needs at least one context and one item field")

    def to_json(self) -> list:
        return [asdict(f) for f in self.fields]

    @classmethod
    def from_json(cls, data: list) -> "FieldSchema":
        return cls(tuple(FieldDef(int(d["field_id"]), d["name"], d["kind"]) for d in data))


class FeatureVector:
    """Sparse (field_id, feature_index, value) entries, sorted by field then index."""

    __slots__ = ("entries", "_arrays")

    def __init__(self, entries: Iterable[tuple] = ()):
        norm = []
        for e in entries:
            if len(e) == 2:
                f, i, v = e[0], e[1], 1.0
            else:
                f, i, v = e
            v = float(v)
            if not math.isfinite(v):
                raise InputError(f"non-finite feature value {v!r}")
            norm.append((int(f), int(i), v))
        norm.sort(key=lambda t: (t[0], t[1]))
        for a, b in zip(norm, norm[1:]):
            if a[0] == b[0] and a[1] == b[1]:
                raise InputError(f"duplicate entry (field={a[0]}, index={a[1]})")
        self.entries: tuple[tuple[int, int, float], ...] = tuple(norm)
        self._arrays = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[int, int, float]]:
        return iter(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureVector) and self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    def __repr__(self) -> str:
        return f"FeatureVector({list(self.entries)!r})"

    @property
    def field_ids(self) -> set[int]:
        return {e[0] for e in self.entries}

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._arrays is None:
            n = len(self.entries)
            fields = np.fromiter((e[0] for e in self.entries), np.int64, n)
            idxs = np.fromiter((e[1] for e in self.entries), np.int64, n)
            vals = np.fromiter((e[2] for e in self.entries), np.float64, n)
            self._arrays = (fields, idxs, vals)
        return self._arrays


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    l2: float = 1e-5
    init_scale: float = 0.1
    k: int = 4
    hash_bits: int = 18
    clip_eps: float = 1e-6
    seed: int = 0
    # "ffm" or "lr" (plain logistic regression, no latent interactions)
    model: str = "ffm"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.l2 >= 0:
            raise ConfigError("l2 must be >= 0")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be > 0")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("k must be a positive integer")
        if int(self.hash_bits) != self.hash_bits or not 8 <= self.hash_bits <= 30:
            raise ConfigError("hash_bits must be an integer in [8, 30]")
        if not 0 < self.clip_eps < 0.5:
            raise ConfigError("clip_eps must lie in (0, 0.5)")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.model not in ("ffm", "lr"):
            raise ConfigError(f"model must be 'ffm' or 'lr', got {self.model!r}")

    @property
    def interactions(self) -> bool:
        return self.model == "ffm"


def count_flops(n_active: int, k: int, *, interactions: bool = True) -> int:
    """FLOPs of one prediction with ``n_active`` features and latent size ``k``.

    2 per linear term, 2k + 2 per interaction pair (k-mult, (k-1)-add dot
    product, two scaling multiplies, one accumulate), 4 for the sigmoid.
    """
    if n_active < 0 or k < 1:
        raise InputError("count_flops needs n_active >= 0 and k >= 1")
    pairs = n_active * (n_active - 1) // 2 if interactions else 0
    return 2 * n_active + pairs * (2 * k + 2) + 4


class FfmModel:
    def __init__(self, schema: FieldSchema, config: TrainConfig, capacity: int = 64):
        self.schema = schema
        self.config = config
        self.k = config.k
        self.hash_bits = config.hash_bits
        self.update_count = 0
        self.frozen = False
        self._seed = np.uint64(int(config.seed) & 0xFFFFFFFFFFFFFFFF)
        self._scale = config.init_scale / math.sqrt(config.k)
        n_fields = max(len(schema), 1)
        self._bias = np.zeros(1)
        self._acc_bias = np.zeros(1)
        self._index = np.zeros(capacity, np.int64)
        self._linear = np.zeros(capacity)
        self._acc_linear = np.zeros(capacity)
        self._latent = np.zeros((capacity, n_fields, self.k))
        self._acc_latent = np.zeros((capacity, n_fields, self.k))
        self._n_slots = 0
        self._slot_of: dict[int, int] = {}

    # -- storage ----------------------------------------------------------

    @property
    def bias(self) -> float:
        return float(self._bias[0])

    @bias.setter
    def bias(self, value: float) -> None:
        self._bias[0] = value

    @property
    def n_slots(self) -> int:
        return self._n_slots

    def _grow(self, need: int) -> None:
        cap = self._index.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2

        def grown(a):
            out = np.zeros((cap,) + a.shape[1:], a.dtype)
            out[: self._n_slots] = a[: self._n_slots]
            return out

        self._index = grown(self._index)
        self._linear = grown(self._linear)
        self._acc_linear = grown(self._acc_linear)
        self._latent = grown(self._latent)
        self._acc_latent = grown(self._acc_latent)

    def ensure_slots(self, idxs: Iterable[int]) -> np.ndarray:
        """Slots for ``idxs``, allocating (and initialising) missing ones."""
        idxs = np.asarray(list(idxs) if not isinstance(idxs, np.ndarray) else idxs, np.int64)
        self._check_writable()
        mask = 1 << self.hash_bits
        new = []
        for i in np.unique(idxs).tolist():
            if i not in self._slot_of:
                if not 0 <= i < mask:
                    raise InputError(f"feature index {i} outside [0, 2^{self.hash_bits})")
                new.append(i)
        if new:
            start = self._n_slots
            self._grow(start + len(new))
            for off, i in enumerate(new):
                self._index[start + off] = i
                self._slot_of[i] = start + off
            self._n_slots = start + len(new)
            _kernels.fill_init(self._latent, self._index, start, self._n_slots, self._seed, self._scale)
        return self.slots_of(idxs)

    def slots_of(self, idxs) -> np.ndarray:
        get = self._slot_of.get
        return np.fromiter((get(int(i), -1) for i in idxs), np.int64, len(idxs))

    @property
    def state(self) -> tuple:
        return (
            self._bias,
            self._acc_bias,
            self._index,
            self._linear,
            self._acc_linear,
            self._latent,
            self._acc_latent,
        )

    @property
    def params(self) -> tuple:
        c = self.config
        return (
            float(c.learning_rate),
            float(c.l2),
            float(self._scale),
            float(c.clip_eps),
            bool(c.interactions),
            self._seed,
        )

    def initial_latent(self, idx: int, target_field: int) -> np.ndarray:
        return np.array(
            [_kernels.init_uniform(self._seed, idx, target_field, c) * self._scale for c in range(self.k)]
        )

    def linear_weight(self, idx: int) -> float:
        s = self._slot_of.get(idx)
        return 0.0 if s is None else float(self._linear[s])

    def latent_vector(self, idx: int, target_field: int) -> np.ndarray:
        s = self._slot_of.get(idx)
        if s is None:
            return self.initial_latent(idx, target_field)
        return self._latent[s, target_field].copy()

    def set_linear(self, idx: int, value: float) -> None:
        s = int(self.ensure_slots([idx])[0])
        self._linear[s] = value

    def set_latent(self, idx: int, target_field: int, vec: Sequence[float]) -> None:
        vec = np.asarray(vec, float)
        if vec.shape != (self.k,):
            raise InputError(f"latent vector must have {self.k} entries")
        s = int(self.ensure_slots([idx])[0])
        self._latent[s, target_field] = vec

    def accumulators(self) -> dict:
        n = self._n_slots
        return {
            "bias": self._acc_bias.copy(),
            "linear": self._acc_linear[:n].copy(),
            "latent": self._acc_latent[:n].copy(),
        }

    def flops(self, n_active: int) -> int:
        return count_flops(n_active, self.k, interactions=self.config.interactions)

    # -- validation -------------------------------------------------------

    def _check_writable(self) -> None:
        if self.frozen:
            raise InputError("model snapshot is read-only")

    def _fv_arrays(self, fv: FeatureVector):
        fields, idxs, vals = fv.arrays()
        if len(fields) and (fields.min() < 0 or fields.max() >= len(self.schema)):
            bad = sorted(set(fields.tolist()) - set(range(len(self.schema))))
            raise SchemaMismatchError(f"feature vector references fields {bad} not in the model schema")
        return fields, idxs, vals

    # -- snapshots and checkpoints -----------------------------------------

    def snapshot(self) -> "FfmModel":
        """Read-only deep copy, safe to share between reader threads."""
        snap = copy.deepcopy(self)
        snap.frozen = True
        return snap

    def state_digest(self) -> bytes:
        n = self._n_slots
        parts = [self._bias, self._acc_bias, self._index[:n], self._linear[:n], self._acc_linear[:n]]
        parts += [self._latent[:n], self._acc_latent[:n]]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts) + str(self.update_count).encode()

    def save(self, path: str | Path) -> None:
        n = self._n_slots
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "schema": self.schema.to_json(),
            "config": asdict(self.config),
            "update_count": self.update_count,
        }
        buf = io.BytesIO()
        np.savez(
            buf,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
            bias=self._bias,
            acc_bias=self._acc_bias,
            index=self._index[:n],
            linear=self._linear[:n],
            acc_linear=self._acc_linear[:n],
            latent=self._latent[:n],
            acc_latent=self._acc_latent[:n],
        )
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "FfmModel":
        try:
            with np.load(Path(path), allow_pickle=False) as z:
                meta = json.loads(z["meta"].tobytes().decode())
                arrays = {k: z[k] for k in z.files if k != "meta"}
        except (OSError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format in {path}")
        model = cls(FieldSchema.from_json(meta["schema"]), TrainConfig(**meta["config"]), capacity=1)
        n = arrays["index"].shape[0]
        model._grow(max(n, 1))
        model._bias[:] = arrays["bias"]
        model._acc_bias[:] = arrays["acc_bias"]
        model._index[:n] = arrays["index"]
        model._linear[:n] = arrays["linear"]
        model._acc_linear[:n] = arrays["acc_linear"]
        model._latent[:n] = arrays["latent"]
        model._acc_latent[:n] = arrays["acc_latent"]
        model._n_slots = n
        model._slot_of = {int(i): s for s, i in enumerate(arrays["index"].tolist())}
        model.update_count = int(meta["update_count"])
        return model


def init_model(schema: FieldSchema, config: TrainConfig) -> FfmModel:
    if not isinstance(schema, FieldSchema):
        raise ConfigError("schema must be a FieldSchema")
    if not isinstance(config, TrainConfig):
        raise ConfigError("config must be a TrainConfig")
    return FfmModel(schema, config)


def predict_logit(model: FfmModel, fv: FeatureVector) -> float:
    fields, idxs, vals = model._fv_arrays(fv)
    slots = model.slots_of(idxs)
    return float(_kernels.logit(model.state, model.params, fields, slots, idxs, vals, len(fields)))


def predict_proba(model: FfmModel, fv: FeatureVector) -> float:
    z = predict_logit(model, fv)
    return float(_kernels.clip_proba(_kernels.sigmoid(z), model.config.clip_eps))


def _check_label(label) -> int:
    if label not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {label!r}")
    return int(label)


def _workspace(model: FfmModel, n: int):
    n = max(n, 1)
    f = model._latent.shape[1]
    return (
        np.empty(n, np.int64),
        np.empty(n),
        np.empty((n, f, model.k)),
        np.empty((n, f), np.bool_),
    )


def gradient(model: FfmModel, fv: FeatureVector, label: int) -> dict:
    """Analytic gradient of logistic loss (+ L2/2 on touched weights) at the current state.

    Returns ``{"bias": g, ("w", idx): g, ("v", idx, field): array}``. Does not
    update the model, but allocates slots for the vector's features.
    """
    label = _check_label(label)
    fields, idxs, vals = model._fv_arrays(fv)
    slots = model.ensure_slots(idxs)
    uniq, glin, glat, gmask = _workspace(model, len(fields))
    _, g = _kernels.gradient(model.state, model.params, fields, slots, idxs, vals, len(fields), float(label), uniq, glin, glat, gmask)
    out: dict = {"bias": float(g)}
    for a in range(len(fields)):
        if uniq[a] != a:
            continue
        i = int(idxs[a])
        out[("w", i)] = float(glin[a])
        for f in range(glat.shape[1]):
            if gmask[a, f]:
                out[("v", i, f)] = glat[a, f].copy()
    return out


def update(model: FfmModel, fv: FeatureVector, label: int) -> float:
    """Train on one example; returns the prediction made before the step."""
    label = _check_label(label)
    fields, idxs, vals = model._fv_arrays(fv)
    slots = model.ensure_slots(idxs)
    uniq, glin, glat, gmask = _workspace(model, len(fields))
    p = _kernels.update(model.state, model.params, fields, slots, idxs, vals, len(fields), float(label), uniq, glin, glat, gmask)
    model.update_count += 1
    return float(p)
