"""Command-line entry point: ``ctxctr {gen,train,eval,experiment,serve-sim,report}``.

Exit codes: 0 success, 1 usage error, 2 runtime error (a JSON error line is
written to stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import RunConfig
from .context_model import CtxBucketizer, IntegrationMode, context_schema, main_schema, parse_mode
from .core_model import CONTEXT, ITEM, FfmModel, FieldSchema, init_model
from .datagen import EncodedLog, generate, group_requests, infer_schema, read_log, write_log
from .errors import CheckpointError, CtxCtrError, ReportError, SchemaMismatchError
from .evaluation import MetricsAccumulator, format_table, read_report_csv, report_csv
from .serving_sim import (
    counters_json,
    daily_lift_report,
    replay_train,
    run_experiment,
    score_log,
    serve_requests,
)

RESOLVED_CONFIG = "config.resolved"
PIPELINE_FILE = "pipeline.json"
MAIN_CKPT = "main.ckpt"
CTX_CKPT = "ctx.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError("")


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set or [])
    if args.threads is not None:
        cfg.set("threads", args.threads)
    if args.strict_ts:
        cfg.set("strict_ts", True)
    if args.seed is not None:
        cfg.set("data.seed", args.seed)
        cfg.set("plan.seeds", str(args.seed))
    cfg.validate()
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- commands -------------------------------------------------------------


def cmd_gen(cfg: RunConfig, args) -> None:
    out = Path(args.out or "impressions.jsonl")
    data = generate(cfg.synthetic())
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.")
    os.close(fd)
    n = write_log(data, tmp)
    os.replace(tmp, out)
    _write_atomic(out.with_name(out.name + ".config"), cfg.dump())
    _emit({"path": str(out), "n_requests": data.n_requests, "n_impressions": n, "ctr": float(data.clicks.mean())})


def _read_records(cfg: RunConfig, args) -> list:
    if not args.log:
        raise UsageError("--log is required")
    return list(read_log(args.log, strict=cfg["strict_ts"]))


def _save_pipeline(out: Path, mode: IntegrationMode, bucketizer: CtxBucketizer, schema: FieldSchema) -> None:
    replaced = sorted(schema.fields[i].name for i in mode.replaced_field_ids)
    meta = {"mode": mode.kind, "replace_fields": replaced, "edges": list(bucketizer.edges)}
    _write_atomic(out / PIPELINE_FILE, json.dumps(meta, indent=2) + "\n")


def cmd_train(cfg: RunConfig, args) -> None:
    records = _read_records(cfg, args)
    schema = infer_schema(records)
    mode = cfg.mode(schema)
    bucketizer = cfg.bucketizer()
    res = replay_train(
        records,
        mode,
        cfg.main_train(),
        cfg.ctx_train(),
        bucketizer,
        cfg["plan.warmup_fraction"],
        strict_ts=cfg["strict_ts"],
    )
    out = Path(args.out or "checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    res.main.save(out / MAIN_CKPT)
    if res.ctx is not None:
        res.ctx.save(out / CTX_CKPT)
    _save_pipeline(out, mode, bucketizer, res.main.schema)
    _write_atomic(out / RESOLVED_CONFIG, cfg.dump())
    acc = res.accumulator
    _emit(
        {
            "checkpoint": str(out),
            "mode": mode.kind,
            "n_impressions": len(res.labels),
            "progressive_n": acc.n,
            "progressive_log_loss": acc.log_loss if acc.n else None,
            "progressive_rig": acc.rig() if acc.n and 0 < acc.gamma < 1 else None,
        }
    )


def _load_models(cfg: RunConfig, args, records: list):
    """(main, ctx, mode, bucketizer) from a checkpoint dir, or fresh from config."""
    if args.fresh:
        if records:
            base = infer_schema(records)
        else:
            syn = cfg.synthetic()
            base = FieldSchema.build(syn.context_fields, syn.item_fields)
        mode = cfg.mode(base)
        schema = main_schema(base.names_of(CONTEXT), base.names_of(ITEM), mode)
        main = init_model(schema, cfg.main_train())
        ctx = init_model(context_schema(schema), cfg.ctx_train()) if mode.uses_context else None
        return main, ctx, mode, cfg.bucketizer()
    if not args.checkpoint:
        raise UsageError("--checkpoint DIR or --fresh is required")
    ck = Path(args.checkpoint)
    try:
        meta = json.loads((ck / PIPELINE_FILE).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read {ck / PIPELINE_FILE}: {exc}") from None
    main = FfmModel.load(ck / MAIN_CKPT)
    base = FieldSchema.build(main.schema.names_of(CONTEXT), main.schema.names_of(ITEM))
    mode = parse_mode(meta["mode"], base, meta.get("replace_fields", ()))
    ctx = FfmModel.load(ck / CTX_CKPT) if mode.uses_context else None
    if ctx is not None and ctx.schema != context_schema(main.schema):
        raise SchemaMismatchError("context checkpoint does not match the main checkpoint schema")
    return main, ctx, mode, CtxBucketizer(tuple(meta["edges"]))


def cmd_eval(cfg: RunConfig, args) -> None:
    records = _read_records(cfg, args)
    main, ctx, mode, bucketizer = _load_models(cfg, args, records)
    base = FieldSchema.build(main.schema.names_of(CONTEXT), main.schema.names_of(ITEM))
    if records and infer_schema(records).names_of(CONTEXT) != base.names_of(CONTEXT):
        raise SchemaMismatchError("log context fields do not match the checkpoint")
    enc = EncodedLog.from_records(records, main.hash_bits, schema=base)
    preds = score_log(main, ctx, enc, mode, bucketizer) if records else np.zeros(0)
    acc = MetricsAccumulator(main.config.clip_eps)
    acc.add_batch(enc.labels, preds)
    if args.predictions:
        lines = ["index,click,prediction"] + [f"{i},{int(c)},{p!r}" for i, (c, p) in enumerate(zip(enc.labels, preds.tolist()))]
        _write_atomic(Path(args.predictions), "\n".join(lines) + "\n")
    n_active = len(base) - (len(mode.replaced_field_ids)) + (1 if mode.uses_context else 0)
    ctx_flops = ctx.flops(len(base.ids_of(CONTEXT))) if ctx is not None else 0
    n_req = max(enc.n_requests, 1)
    report = {
        "mode": mode.kind,
        "n": acc.n,
        "gamma": acc.gamma if acc.n else None,
        "log_loss": acc.log_loss if acc.n else None,
        "rig": None,
        "auc": None,
        "flops_per_ad": main.flops(n_active),
        "flops_per_request": (ctx_flops * enc.n_requests + main.flops(n_active) * acc.n) / n_req,
    }
    if acc.n and 0 < acc.gamma < 1:
        report["rig"] = acc.rig()
        report["auc"] = acc.auc()
    _emit(report)


def cmd_serve_sim(cfg: RunConfig, args) -> None:
    records = _read_records(cfg, args)
    main, ctx, mode, bucketizer = _load_models(cfg, args, records)
    counters = serve_requests(ctx and ctx.snapshot(), main.snapshot(), group_requests(records), mode, bucketizer)
    secs = counters.wall_time_ns / 1e9
    req = counters.requests
    per_req_with = (counters.total_flops_main + counters.total_flops_ctx) / req if req else 0.0
    per_req_without = counters.total_flops_main / req if req else 0.0
    summary = {
        "counters": counters.to_dict(),
        "requests_per_sec": req / secs if secs > 0 else 0.0,
        "flops_per_request": per_req_with,
        "flops_per_request_main_only": per_req_without,
        "ctx_flops_share": counters.total_flops_ctx / (counters.total_flops_main + counters.total_flops_ctx)
        if counters.total_flops_main + counters.total_flops_ctx
        else 0.0,
    }
    if args.out:
        out = Path(args.out)
        _write_atomic(out / "counters.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        _write_atomic(out / RESOLVED_CONFIG, cfg.dump())
    _emit(summary)


def cmd_experiment(cfg: RunConfig, args) -> None:
    result = run_experiment(
        cfg.plan(),
        cfg.synthetic(),
        cfg.main_train(),
        cfg.ctx_train(),
        cfg.bucketizer(),
        threads=cfg["threads"],
    )
    daily = daily_lift_report(result)
    table = format_table(result.reports)
    outputs = {
        "report.csv": report_csv(result.reports),
        "daily_lifts.csv": daily.to_csv(),
        "counters.json": counters_json(result),
        "table.txt": table,
        RESOLVED_CONFIG: cfg.dump(),
    }
    out = Path(args.out or "experiment_out")
    for name, text in outputs.items():
        _write_atomic(out / name, text)
    sys.stdout.write(table)


def cmd_report(cfg: RunConfig, args) -> None:
    out = Path(args.out or "experiment_out")
    try:
        rows = read_report_csv((out / "report.csv").read_text(encoding="utf-8"))
        daily = (out / "daily_lifts.csv").read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read experiment output in {out}: {exc.strerror}") from None
    table = format_table(rows)
    _write_atomic(out / "table.txt", table)
    sys.stdout.write(table)
    sys.stdout.write("\n")
    sys.stdout.write(daily)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "serve-sim": cmd_serve_sim,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value config file")
    shared.add_argument("--seed", type=int, help="generator seed (sets data.seed and plan.seeds)")
    shared.add_argument("--out", help="output file (gen) or directory")
    shared.add_argument("--threads", type=int, help="worker threads across seeds")
    shared.add_argument("--strict-ts", action="store_true", help="fail on out-of-order timestamps")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    shared.add_argument("--log", help="impression log (JSONL)")
    shared.add_argument("--checkpoint", help="checkpoint directory written by train")
    shared.add_argument("--fresh", action="store_true", help="use untrained models instead of a checkpoint")
    shared.add_argument("--predictions", help="eval: write per-impression predictions CSV here")

    parser = _Parser(prog="ctxctr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[shared])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        if str(exc):
            print(f"ctxctr: {exc}", file=sys.stderr)
        return 1
    except (CtxCtrError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
