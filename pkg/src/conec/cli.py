"""Command-line experiment runner.

Modes: ``train`` (one domain order, writes a checkpoint), ``eval`` (reload a
checkpoint and re-evaluate), ``sweep`` (several orders plus a mean/std
aggregate), ``ablation`` (classifier, adapter and router variants) and
``dump-embeddings`` (CLS embeddings per layer as CSV).

Exit codes: 0 ok, 2 config error, 3 numeric error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from conec import config as cfgmod
from conec.backbone import Backbone
from conec.engine import Engine, check_invariants, run_order
from conec.errors import ConfigError, InvalidInputError, InvalidShapeError, NumericError
from conec.stream import StreamConfig, domain_orders, generate

log = logging.getLogger("conec")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4
MODES = ("train", "eval", "sweep", "ablation", "dump-embeddings")
METRIC_COLUMNS = ("order_id", "after_domain", "eval_domain", "accuracy", "dc_accuracy",
                  "oracle_accuracy", "exit_layer_mean")
SUMMARY_COLUMNS = ("order_id", "order", "avg", "last", "oracle_avg", "oracle_last", "dc_last")
ABLATIONS = {
    "stochastic": {},
    "cosine": {"head_type": "cosine"},
    "linear": {"head_type": "linear"},
    "specific_only": {"method": "specific_only"},
    "no_ball": {"use_ball": False},
    "last_layer_router": {"router_layers": "last"},
    "finetune": {"method": "finetune"},
}


class InvariantViolation(Exception):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


def write_metrics(out: str, rows: list[dict]) -> None:
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump({"columns": list(METRIC_COLUMNS), "rows": [{c: r[c] for c in METRIC_COLUMNS} for r in rows]},
                  fh, indent=1)
        fh.write("\n")


def write_table(path: str, columns, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def aggregate(summaries: list[dict]) -> list[dict]:
    """Mean and (population) std rows over per-order summaries."""
    out = []
    for label, fn in (("mean", np.mean), ("std", np.std)):
        row = {"order_id": label, "order": ""}
        for key in SUMMARY_COLUMNS[2:]:
            vals = [s[key] for s in summaries if s[key] is not None]
            row[key] = float(fn(vals)) if vals else None
        out.append(row)
    return out


def parse_order(text: str | None, num_domains: int):
    if text is None:
        return None
    try:
        order = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"--order must be comma-separated integers, got {text!r}") from None
    if sorted(order) != list(range(1, len(order) + 1)) or len(order) > num_domains:
        raise ConfigError(f"--order {text!r} is not a permutation of 1..k with k <= {num_domains}")
    return order


def _setup_logging(out: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(out, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("conec")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _run_checked(domains, order, cfg, order_id, backbone, violations: list):
    """One order; routed-above-oracle rows are collected, reported after outputs are written."""
    eng, rec = run_order(domains, order, cfg.engine, backbone, order_id, cfg.stream.num_classes)
    bad = check_invariants(rec)
    for msg in bad:
        log.error("invariant violation: %s", msg)
    violations.extend(bad)
    return eng, rec, len(bad)


def _finish(violations: list) -> int:
    if violations:
        raise InvariantViolation(f"{len(violations)} row(s) with routed accuracy above oracle: {violations[0]}")
    return EXIT_OK


def mode_train(cfg, args, out):
    domains = generate(cfg.stream)
    order = args.order or tuple(range(1, cfg.stream.num_domains + 1))
    violations = []
    eng, rec, _ = _run_checked(domains, order, cfg, 0, Backbone(cfg.backbone), violations)
    write_metrics(out, rec.rows)
    write_table(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, [rec.summary()])
    ckpt = args.checkpoint or os.path.join(out, "checkpoint.bin")
    stream = asdict(cfg.stream)
    eng.save(ckpt, rec, extra={"stream": {k: list(v) if isinstance(v, tuple) else v for k, v in stream.items()}})
    log.info("summary %s", rec.summary())
    return _finish(violations)


def mode_eval(cfg, args, out):
    if not args.checkpoint:
        raise ConfigError("eval mode needs --checkpoint")
    eng, stored = Engine.load(args.checkpoint)
    if stored is None:
        raise ConfigError("checkpoint holds no metrics to reproduce")
    stream_cfg = StreamConfig(**eng.extra["stream"]) if "stream" in eng.extra else cfg.stream
    by_id = {d.domain: d for d in generate(stream_cfg)}
    rows = eng.evaluate([by_id[d] for d in eng.trained], stored.order_id)
    final = stored.step_rows(stored.steps()[-1])
    if rows != final:
        raise InvariantViolation("re-evaluated metrics differ from the checkpointed final row")
    write_metrics(out, stored.rows)
    write_table(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, [stored.summary()])
    log.info("checkpoint metrics reproduced exactly (%d rows)", len(rows))
    return EXIT_OK


def mode_sweep(cfg, args, out):
    domains = generate(cfg.stream)
    backbone = Backbone(cfg.backbone)
    if args.order:
        orders = [args.order]
    else:
        orders = domain_orders(cfg.stream.num_domains, cfg.num_orders, cfg.order_seed)
    rows, summaries, violations = [], [], []
    for i, order in enumerate(orders):
        _, rec, _ = _run_checked(domains, order, cfg, i, backbone, violations)
        rows.extend(rec.rows)
        summaries.append(rec.summary())
        log.info("order %d %s: avg %.4f last %.4f", i, order, summaries[-1]["avg"], summaries[-1]["last"])
    write_metrics(out, rows)
    write_table(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, summaries + aggregate(summaries))
    return _finish(violations)


def mode_ablation(cfg, args, out):
    domains = generate(cfg.stream)
    backbone = Backbone(cfg.backbone)
    order = args.order or tuple(range(1, cfg.stream.num_domains + 1))
    rows, table, violations = [], [], []
    for i, (name, override) in enumerate(ABLATIONS.items()):
        variant = replace(cfg, engine=replace(cfg.engine, **override))
        _, rec, nbad = _run_checked(domains, order, variant, i, backbone, violations)
        rows.extend(rec.rows)
        table.append({"variant": name, **rec.summary(), "invariant_violations": nbad})
        log.info("variant %s: %s", name, table[-1])
    write_metrics(out, rows)
    write_table(os.path.join(out, "ablation.csv"), ("variant",) + SUMMARY_COLUMNS[2:] + ("invariant_violations",), table)
    return _finish(violations)


def _dump(path, eng, domains, adapted: bool):
    L = eng.backbone.num_layers
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "class", "layer"] + [f"e_{i}" for i in range(eng.backbone.dim)])
        for d in domains:
            if adapted:
                dom = d.domain if d.domain in eng.bank.specific else None
                trace = eng.backbone.run(d.x_test, eng.bank.blocks_for(dom))
            else:
                trace = eng.backbone.forward_plain(d.x_test)
            for ell in range(1, L + 1):
                for z, y in zip(trace.cls_at(ell), d.y_test):
                    w.writerow([d.domain, int(y), ell] + [repr(float(v)) for v in z])


def mode_dump(cfg, args, out):
    domains = generate(cfg.stream)
    order = args.order or tuple(range(1, cfg.stream.num_domains + 1))
    violations = []
    eng, rec, _ = _run_checked(domains, order, cfg, 0, Backbone(cfg.backbone), violations)
    write_metrics(out, rec.rows)
    seen = [d for d in domains if d.domain in eng.trained]
    _dump(os.path.join(out, "embeddings_plain.csv"), eng, seen, adapted=False)
    _dump(os.path.join(out, "embeddings_adapted.csv"), eng, seen, adapted=True)
    return _finish(violations)


HANDLERS = {"train": mode_train, "eval": mode_eval, "sweep": mode_sweep, "ablation": mode_ablation,
            "dump-embeddings": mode_dump}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conec", description="Domain-incremental LoRA experiments on synthetic streams.")
    p.add_argument("--config", help="flat key = value config file (defaults if omitted)")
    p.add_argument("--mode", choices=MODES, default="train")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--order", help='domain order, e.g. "3,1,2"')
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint path (written by train, read by eval)")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {args.out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = _setup_logging(args.out)
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        args.order = parse_order(args.order, cfg.stream.num_domains)
        log.info("mode %s config:\n%s", args.mode, cfgmod.dumps(cfg))
        return HANDLERS[args.mode](cfg, args, args.out)
    except (ConfigError, InvalidInputError, InvalidShapeError) as exc:
        log.error("config error: %s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric error: %s", exc)
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        log.error("invariant violation: %s", exc)
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    finally:
        logging.getLogger("conec").removeHandler(handler)
        handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
