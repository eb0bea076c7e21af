"""Flat ``key = value`` run configuration.

Every key has a default; files and ``--set`` overrides may only name known
keys. List values are comma separated. Lines starting with ``#`` are
comments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .context_model import MODES, CtxBucketizer, parse_mode
from .core_model import FieldSchema, TrainConfig
from .datagen import SyntheticConfig
from .errors import ConfigError
from .serving_sim import ExperimentPlan

# key -> (default, description)
KEYS: dict[str, tuple[object, str]] = {
    "data.n_context_fields": (4, "number of context fields"),
    "data.n_item_fields": (3, "number of item fields"),
    "data.cardinality": (200, "distinct values per field"),
    "data.beta_ctx": (0.8, "std of per-value context effects"),
    "data.beta_item": (0.8, "std of per-value item effects"),
    "data.beta_int": (0.3, "strength of the context x item interaction"),
    "data.base_ctr": (0.2, "target base CTR"),
    "data.n_requests": (200_000, "requests to generate"),
    "data.candidates": (4, "candidates per request"),
    "data.seed": (1, "generator seed for gen"),
    "main.learning_rate": (0.05, "AdaGrad step size"),
    "main.l2": (1e-5, "L2 on linear and latent weights"),
    "main.init_scale": (0.1, "latent init upper bound times sqrt(k)"),
    "main.k": (4, "latent dimension"),
    "main.hash_bits": (18, "feature index space is 2^hash_bits"),
    "main.clip_eps": (1e-6, "probability clipping"),
    "main.seed": (0, "latent init seed"),
    "main.model": ("ffm", "ffm or lr"),
    "ctx_model.learning_rate": (0.1, "AdaGrad step size"),
    "ctx_model.l2": (1e-5, "L2 on linear and latent weights"),
    "ctx_model.init_scale": (0.1, "latent init upper bound times sqrt(k)"),
    "ctx_model.k": (4, "latent dimension"),
    "ctx_model.clip_eps": (1e-6, "probability clipping"),
    "ctx_model.seed": (0, "latent init seed"),
    "ctx_model.model": ("lr", "ffm or lr"),
    "ctx.buckets": (32, "equal-width buckets for the derived feature"),
    "ctx.edges": ("", "explicit bucket edges (overrides ctx.buckets)"),
    "ctx.mode": ("add", "integration mode for train/eval/serve-sim"),
    "ctx.replace_fields": ("", "context fields dropped by replace (default all)"),
    "plan.variants": ("baseline,replace,add", "experiment variants"),
    "plan.warmup_fraction": (0.2, "leading fraction not recorded"),
    "plan.eval_fraction": (0.5, "trailing fraction used for metrics"),
    "plan.seeds": ("1,2,3", "generator seeds, one log per seed"),
    "plan.day_chunks": (6, "chunks for the daily lift series"),
    "threads": (1, "worker threads across seeds (experiment only)"),
    "strict_ts": (False, "fail on out-of-order timestamps"),
}


def _coerce(key: str, raw: str):
    default = KEYS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _split(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (v, _) in KEYS.items()})

    def set(self, key: str, raw) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw) if isinstance(raw, str) else raw

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            cfg.update_from_text(text)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        return cfg

    def update_from_text(self, text: str) -> None:
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n}: expected key = value")
            k, v = line.split("=", 1)
            self.set(k.strip(), v)

    def dump(self) -> str:
        lines = ["# resolved configuration"]
        for k in KEYS:
            v = self.values[k]
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    # -- typed views --------------------------------------------------------

    def synthetic(self, seed: int | None = None) -> SyntheticConfig:
        v = self.values
        return SyntheticConfig(
            n_context_fields=v["data.n_context_fields"],
            n_item_fields=v["data.n_item_fields"],
            cardinality=v["data.cardinality"],
            beta_ctx=v["data.beta_ctx"],
            beta_item=v["data.beta_item"],
            beta_int=v["data.beta_int"],
            base_ctr=v["data.base_ctr"],
            n_requests=v["data.n_requests"],
            candidates_per_request=v["data.candidates"],
            seed=v["data.seed"] if seed is None else seed,
        )

    def _train(self, prefix: str, hash_bits: int) -> TrainConfig:
        v = self.values
        return TrainConfig(
            learning_rate=v[f"{prefix}.learning_rate"],
            l2=v[f"{prefix}.l2"],
            init_scale=v[f"{prefix}.init_scale"],
            k=v[f"{prefix}.k"],
            hash_bits=hash_bits,
            clip_eps=v[f"{prefix}.clip_eps"],
            seed=v[f"{prefix}.seed"],
            model=v[f"{prefix}.model"],
        )

    def main_train(self) -> TrainConfig:
        return self._train("main", self.values["main.hash_bits"])

    def ctx_train(self) -> TrainConfig:
        return self._train("ctx_model", self.values["main.hash_bits"])

    def bucketizer(self) -> CtxBucketizer:
        edges = _split(self.values["ctx.edges"])
        if edges:
            try:
                return CtxBucketizer(tuple(float(e) for e in edges))
            except ValueError:
                raise ConfigError(f"bad ctx.edges {self.values['ctx.edges']!r}") from None
        return CtxBucketizer.equal_width(self.values["ctx.buckets"])

    @property
    def replace_fields(self) -> tuple[str, ...]:
        return _split(self.values["ctx.replace_fields"])

    def mode(self, schema: FieldSchema):
        return parse_mode(self.values["ctx.mode"], schema, self.replace_fields)

    def plan(self) -> ExperimentPlan:
        v = self.values
        try:
            seeds = tuple(int(s) for s in _split(v["plan.seeds"]))
        except ValueError:
            raise ConfigError(f"bad plan.seeds {v['plan.seeds']!r}") from None
        return ExperimentPlan(
            variants=_split(v["plan.variants"]),
            replace_fields=self.replace_fields,
            warmup_fraction=v["plan.warmup_fraction"],
            eval_fraction=v["plan.eval_fraction"],
            seeds=seeds,
            day_chunks=v["plan.day_chunks"],
        )

    def validate(self) -> None:
        """Build every typed view once so bad values fail before any output."""
        self.synthetic()
        self.main_train()
        self.ctx_train()
        self.bucketizer()
        self.plan()
        if self.values["ctx.mode"].strip().lower() not in MODES:
            raise ConfigError(f"unknown ctx.mode {self.values['ctx.mode']!r}")
        if self.values["threads"] < 1:
            raise ConfigError("threads must be >= 1")
