"""Auxiliary context-only CTR model and the derived feature it feeds the main model.

The context model sees context fields only. Its prediction is bucketized
into a categorical feature in a dedicated ``derived`` field, which is then
either appended to the main model's input (``add``) or substituted for a set
of raw context fields (``replace``).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core_model import CONTEXT, DERIVED, FeatureVector, FfmModel, FieldSchema, predict_proba
from .datagen import feature_index
from .errors import ConfigError, ContractViolationError, DoubleAugmentationError, InputError

DERIVED_FIELD_NAME = "ctx_ctr"
DEFAULT_BUCKETS = 32

BASELINE = "baseline"
REPLACE = "replace"
ADD = "add"
MODES = (BASELINE, REPLACE, ADD)


@dataclass(frozen=True)
class ContextProjection:
    context_field_ids: frozenset[int]

    @classmethod
    def of(cls, schema: FieldSchema) -> "ContextProjection":
        ids = frozenset(schema.ids_of(CONTEXT))
        if not ids:
            raise ConfigError("schema has no context fields")
        return cls(ids)

    def __post_init__(self):
        if not self.context_field_ids:
            raise ConfigError("context projection must not be empty")


def context_schema(schema: FieldSchema) -> FieldSchema:
    """Schema of the context model: the context fields of ``schema``, same ids."""
    names = schema.names_of(CONTEXT)
    if schema.ids_of(CONTEXT) != tuple(range(len(names))):
        raise ConfigError("context fields must come first in the main schema")
    return FieldSchema.build(names)


@dataclass(frozen=True)
class CtxBucketizer:
    edges: tuple[float, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if any(not 0.0 < e < 1.0 for e in edges):
            raise ConfigError("bucket edges must lie in (0, 1)")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError("bucket edges must be strictly increasing")

    @classmethod
    def equal_width(cls, num_buckets: int = DEFAULT_BUCKETS) -> "CtxBucketizer":
        if int(num_buckets) != num_buckets or num_buckets < 1:
            raise ConfigError("num_buckets must be a positive integer")
        return cls(tuple(i / num_buckets for i in range(1, num_buckets)))

    @property
    def num_buckets(self) -> int:
        return len(self.edges) + 1


@dataclass(frozen=True)
class DerivedCtxFeature:
    field_id: int
    bucket_index: int
    raw_p: float
    feature_index: int

    def entry(self) -> tuple[int, int, float]:
        return (self.field_id, self.feature_index, 1.0)


@dataclass(frozen=True)
class IntegrationMode:
    kind: str
    replaced_field_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown integration mode {self.kind!r}")
        object.__setattr__(self, "replaced_field_ids", frozenset(self.replaced_field_ids))
        if self.kind == REPLACE and not self.replaced_field_ids:
            raise ConfigError("replace mode needs a non-empty field set")
        if self.kind != REPLACE and self.replaced_field_ids:
            raise ConfigError("only replace mode takes a field set")

    @classmethod
    def baseline(cls) -> "IntegrationMode":
        return cls(BASELINE)

    @classmethod
    def add(cls) -> "IntegrationMode":
        return cls(ADD)

    @classmethod
    def replace(cls, field_ids: Iterable[int]) -> "IntegrationMode":
        return cls(REPLACE, frozenset(field_ids))

    @property
    def uses_context(self) -> bool:
        return self.kind != BASELINE

    def validate(self, schema: FieldSchema) -> None:
        ctx = set(schema.ids_of(CONTEXT))
        bad = self.replaced_field_ids - ctx
        if bad:
            raise ConfigError(f"replace set contains non-context fields {sorted(bad)}")

    def label(self) -> str:
        return self.kind


def parse_mode(name: str, schema: FieldSchema, replace_fields: Sequence[str] = ()) -> IntegrationMode:
    """Build a mode from its config name; replace defaults to every context field."""
    name = name.strip().lower()
    if name == BASELINE:
        return IntegrationMode.baseline()
    if name == ADD:
        return IntegrationMode.add()
    if name == REPLACE:
        ids = [schema.by_name(n).field_id for n in replace_fields] if replace_fields else schema.ids_of(CONTEXT)
        mode = IntegrationMode.replace(ids)
        mode.validate(schema)
        return mode
    raise ConfigError(f"unknown integration mode {name!r}")


def project_context(fv: FeatureVector, proj: ContextProjection) -> FeatureVector:
    ids = proj.context_field_ids
    return FeatureVector(e for e in fv if e[0] in ids)


def _check_context_only(model: FfmModel, fv: FeatureVector) -> None:
    kinds = {f.kind for f in model.schema.fields}
    if kinds - {CONTEXT}:
        raise ContractViolationError("context model schema contains non-context fields")
    # ids beyond the context schema are item or derived fields of the main schema
    bad = [f for f in fv.field_ids if f >= len(model.schema)]
    if bad:
        raise ContractViolationError(f"non-context fields {sorted(bad)} reached the context model")


def predict_context_ctr(ctx_model: FfmModel, ctx_fv: FeatureVector) -> float:
    _check_context_only(ctx_model, ctx_fv)
    return predict_proba(ctx_model, ctx_fv)


def bucket_feature_index(bucket: int, hash_bits: int, field_name: str = DERIVED_FIELD_NAME) -> int:
    return feature_index(field_name, f"b{bucket}", hash_bits)


def bucketize(p: float, b: CtxBucketizer, field_id: int = 0, hash_bits: int = 18, field_name: str = DERIVED_FIELD_NAME) -> DerivedCtxFeature:
    """Bucket index = number of edges <= p."""
    if not 0.0 < p < 1.0:
        raise InputError(f"probability {p!r} outside (0, 1)")
    bucket = bisect.bisect_right(b.edges, p)
    return DerivedCtxFeature(field_id, bucket, float(p), bucket_feature_index(bucket, hash_bits, field_name))


def augment(fv: FeatureVector, derived: DerivedCtxFeature, mode: IntegrationMode) -> FeatureVector:
    if mode.kind == BASELINE:
        return fv
    if derived.field_id in fv.field_ids:
        raise DoubleAugmentationError("feature vector already carries the derived field")
    if mode.kind == REPLACE:
        drop = mode.replaced_field_ids
        return FeatureVector([e for e in fv if e[0] not in drop] + [derived.entry()])
    return FeatureVector(list(fv) + [derived.entry()])


def main_schema(context: Sequence[str], item: Sequence[str], mode: IntegrationMode) -> FieldSchema:
    schema = FieldSchema.build(context, item, DERIVED_FIELD_NAME if mode.uses_context else None)
    schema.validate_main()
    mode.validate(schema)
    return schema


def derived_field_id(schema: FieldSchema) -> int:
    fd = schema.derived_field
    if fd is None or fd.kind != DERIVED:
        raise ConfigError("schema has no derived field")
    return fd.field_id
