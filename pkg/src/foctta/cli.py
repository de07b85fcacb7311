"""Command-line entry point: pretrain, warmup, adapt, sweep and report.

Exit codes: 0 success, 2 configuration or artifact error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ExperimentConfig
from .data import DomainStream, generate_source
from .errors import ConfigError, FocttaError, PlanError
from .nn import build_reference_cnn, load_checkpoint, save_checkpoint
from .ops import BATCH_STATS
from .runtime import FOCTTA, RANDOM_K, AdaptOptions, adapt_stream
from .train import evaluate, pretrain
from .warmup import (GRAD_NORM, L1_NORM, AdaptationPlan, score_l1,
                     score_weight_norm, select_topk, warmup)

log = logging.getLogger("foctta")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

CHECKPOINT = "model.ckpt"
PLAN = "plan.json"
SUMMARY = "summary.json"
RUN_LOG = "log.csv"


# ---------------------------------------------------------------- helpers
def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise ConfigError(f"missing {what}: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def source_split(cfg: ExperimentConfig):
    d = cfg.data
    return generate_source(d.n_train + d.n_test, d.num_classes, cfg.seed).split(d.n_train)


def load_model(cfg: ExperimentConfig, path: Path):
    if not path.is_file():
        raise ConfigError(f"missing checkpoint: {path} (run `foctta pretrain` first)")
    model, meta = load_checkpoint(path)
    if meta.get("model_hash") != cfg.model_hash():
        raise PlanError(f"checkpoint {path} was built from a different config "
                        f"(model hash {str(meta.get('model_hash'))[:12]} != {cfg.model_hash()[:12]})")
    return model, meta


def load_plan(path: Path, checkpoint_sha: str) -> tuple[AdaptationPlan, dict]:
    doc = read_json(path, "plan")
    if doc.get("lineage", {}).get("checkpoint_sha256") != checkpoint_sha:
        raise PlanError(f"plan {path} was profiled on a different checkpoint")
    return AdaptationPlan.from_dict(doc["plan"]), doc


def effective_plan(cfg: ExperimentConfig, plan: AdaptationPlan, batch_size: int) -> AdaptationPlan:
    a = cfg.adapt
    return replace(plan, lam=a.lam, lr=a.lr, h0=a.h0_factor * math.log(cfg.data.num_classes),
                   batch_size=batch_size, bn_mode=a.bn_mode or BATCH_STATS)


def make_stream(cfg: ExperimentConfig, batch_size: int) -> DomainStream:
    a = cfg.adapt
    return DomainStream([(k, 0 if k == "none" else a.severity) for k in a.corruptions],
                        a.samples_per_segment, cfg.data.num_classes, cfg.stream_seed, batch_size)


# ---------------------------------------------------------------- commands
def cmd_pretrain(cfg: ExperimentConfig, out: Path, args) -> int:
    train, test = source_split(cfg)
    model = build_reference_cnn(cfg.cnn_config())
    p = cfg.pretrain
    history = pretrain(model, train, epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, seed=cfg.seed,
                       recipe=p.recipe, label_smoothing=p.label_smoothing)
    acc = evaluate(model, test.images, test.labels)
    print(f"clean held-out accuracy {100 * acc:.2f}% after {p.epochs} epochs")
    if acc < p.accuracy_floor:
        print(f"error: clean accuracy {100 * acc:.2f}% is below the floor {100 * p.accuracy_floor:.0f}%; "
              f"final training loss {history[-1]:.4f}", file=sys.stderr)
        return EXIT_RUNTIME
    meta = {"model_hash": cfg.model_hash(), "config_hash": cfg.hash(), "seed": cfg.seed,
            "clean_accuracy": acc, "n_train": cfg.data.n_train, "n_test": cfg.data.n_test,
            "loss_history": history, "version": __version__}
    ckpt = out / CHECKPOINT
    save_checkpoint(model, ckpt, meta)
    write_json(out / "pretrain.json", {**meta, "checkpoint_sha256": sha256_file(ckpt)})
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_warmup(cfg: ExperimentConfig, out: Path, args) -> int:
    ckpt = Path(args.checkpoint or out / CHECKPOINT)
    model, meta = load_model(cfg, ckpt)
    w = cfg.warmup
    if w.metric == GRAD_NORM:
        train, _ = source_split(cfg)
        iv = warmup(model, train, recipe=w.recipe, epochs=w.epochs, lr=w.lr, seed=cfg.seed,
                    batch_size=w.batch_size, norm=w.norm, keep_weights=w.keep_weights)
        if w.keep_weights:
            # the plan then belongs to the warmed-up weights; adapt with --checkpoint warmup.ckpt
            ckpt = out / "warmup.ckpt"
            save_checkpoint(model, ckpt, meta)
    else:
        iv = score_l1(model) if w.metric == L1_NORM else score_weight_norm(model)
    plan = effective_plan(cfg, select_topk(iv, w.alpha), cfg.adapt.batch_size)
    doc = {"plan": plan.to_dict(), "importance": iv.to_dict(),
           "lineage": {"config_hash": cfg.hash(), "checkpoint_sha256": sha256_file(ckpt),
                       "checkpoint": ckpt.name}}
    write_json(out / PLAN, doc)
    print(iv.table())
    print(f"selected layers {plan.selected} (M={plan.M}); wrote {out / PLAN}")
    return EXIT_OK


def run_adapt(cfg: ExperimentConfig, ckpt: Path, plan_path: Path | None, mode: str,
              batch_size: int, out: Path) -> dict:
    """One adaptation run; writes summary JSON and log CSV into ``out``."""
    model, _ = load_model(cfg, ckpt)
    ckpt_sha = sha256_file(ckpt)
    plan, plan_sha = None, None
    if mode in (FOCTTA, RANDOM_K) or (plan_path is not None and plan_path.is_file()):
        if plan_path is None:
            raise ConfigError(f"mode {mode} needs a plan (run `foctta warmup` first)")
        plan, _ = load_plan(plan_path, ckpt_sha)
        plan = effective_plan(cfg, plan, batch_size)
        plan_sha = sha256_file(plan_path)
    a = cfg.adapt
    opts = AdaptOptions(bn_mode=a.bn_mode, reg_target=a.reg_target, seed=cfg.seed,
                        lr_reference_batch=a.lr_reference_batch)
    # baselines without a plan still honour the configured hyperparameters
    run_plan = plan or effective_plan(cfg, AdaptationPlan(selected=[]), batch_size)
    result = adapt_stream(model, make_stream(cfg, batch_size), mode, run_plan, opts)
    summary = result.summary()
    summary["batch_size"] = batch_size
    summary["seed"] = cfg.seed
    summary["adapt"] = cfg.to_dict()["adapt"] | {"mode": mode, "batch_size": batch_size}
    summary["plan"] = plan.to_dict() if plan is not None else None
    summary["lineage"] = {"config_hash": cfg.hash(), "model_hash": cfg.model_hash(),
                          "checkpoint_sha256": ckpt_sha, "plan_sha256": plan_sha, "version": __version__}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / SUMMARY, summary)
    (out / RUN_LOG).write_text(result.log_csv(), encoding="utf-8")
    return summary


def _plan_arg(args, out: Path) -> Path | None:
    if args.plan:
        return Path(args.plan)
    p = out / PLAN
    return p if p.is_file() else None


def cmd_adapt(cfg: ExperimentConfig, out: Path, args) -> int:
    mode = args.mode or cfg.adapt.mode
    b = args.batch_size or cfg.adapt.batch_size
    run_dir = Path(args.run_dir) if args.run_dir else out
    s = run_adapt(cfg, Path(args.checkpoint or out / CHECKPOINT), _plan_arg(args, out), mode, b, run_dir)
    rows = [(d["domain"], d["severity"], f"{d['error_pct']:.2f}") for d in s["domains"]]
    print(_table(("domain", "severity", "error %"), rows))
    print(f"{mode} B={b}: average error {s['average_error_pct']:.2f}%; wrote {run_dir / SUMMARY}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    modes = args.modes or list(cfg.sweep.modes)
    sizes = args.batch_sizes or list(cfg.sweep.batch_sizes)
    ckpt = Path(args.checkpoint or out / CHECKPOINT)
    plan = _plan_arg(args, out)
    sweep_dir = out / "sweep"
    rows = []
    for mode in modes:
        for b in sizes:
            s = run_adapt(cfg, ckpt, plan, mode, b, sweep_dir / f"{mode}_B{b}")
            t = s["memory"]["totals"]
            rows.append((mode, b, f"{s['average_error_pct']:.4f}", t["analytic_total"],
                         t["measured_weight_grad_bytes"], t["measured_passthrough_bytes"]))
            print(f"{mode:>14} B={b:<3} error {s['average_error_pct']:6.2f}%  analytic bytes {t['analytic_total']}")
    header = ("mode", "batch_size", "average_error_pct", "analytic_total_bytes",
              "measured_weight_grad_bytes", "measured_passthrough_bytes")
    (sweep_dir / "comparison.csv").write_text(_csv_text(header, rows), encoding="utf-8")
    print(f"wrote {sweep_dir / 'comparison.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- report
def collect_summaries(paths: Sequence[str]) -> list[dict]:
    found = []
    for p in map(Path, paths):
        files = [p] if p.is_file() else sorted(p.rglob(SUMMARY))
        if not p.exists():
            raise ConfigError(f"no such run directory: {p}")
        found += files
    if not found:
        raise ConfigError("no summary.json files found under the given paths")
    return [read_json(f, "summary") | {"_path": str(f)} for f in found]


def cost_model(summary: dict) -> tuple[int, int]:
    """(trainable parameter bytes, activation bytes per sample) of a run's plan."""
    rows = [r for r in summary["memory"]["rows"] if r["trainable"]]
    return sum(r["param_bytes"] for r in rows), sum(r["activation_bytes_per_sample"] for r in rows)


def budget_rows(summaries: list[dict], budget: int, max_batch: int) -> list[tuple]:
    """Largest batch size whose analytic cost fits ``budget``, per mode."""
    out, seen = [], set()
    for s in summaries:
        if s["mode"] in seen:
            continue
        seen.add(s["mode"])
        params, per_sample = cost_model(s)
        if per_sample == 0:
            b = max_batch if params <= budget else 0
        else:
            b = min(max_batch, (budget - params) // per_sample)
        if b < 1:
            out.append((s["mode"], "infeasible", "-", params + per_sample))
        else:
            out.append((s["mode"], int(b), params + per_sample * int(b), params + per_sample))
    return out


def build_report(summaries: list[dict], budget: int | None = None) -> dict:
    domains = []
    for s in summaries:
        for d in s["domains"]:
            if d["domain"] not in domains:
                domains.append(d["domain"])
    err_rows = []
    for s in sorted(summaries, key=lambda s: (s["mode"], -s["batch_size"])):
        by = {d["domain"]: d["error_pct"] for d in s["domains"]}
        err_rows.append([s["mode"], s["batch_size"]] + [round(by[d], 2) if d in by else "-" for d in domains]
                        + [round(s["average_error_pct"], 2)])
    modes = sorted({s["mode"] for s in summaries})
    sizes = sorted({s["batch_size"] for s in summaries}, reverse=True)
    mem = {(s["mode"], s["batch_size"]): s["memory"]["totals"] for s in summaries}
    mem_rows = [[m] + [mem[(m, b)]["analytic_total"] if (m, b) in mem else "-" for b in sizes] for m in modes]
    err = {(s["mode"], s["batch_size"]): s["average_error_pct"] for s in summaries}
    deg_rows = []
    if len(sizes) > 1:
        lo, hi = min(sizes), max(sizes)
        for m in modes:
            if (m, lo) in err and (m, hi) in err:
                deg_rows.append([m, lo, hi, round(err[(m, lo)] - err[(m, hi)], 2)])
    report = {
        "errors": {"header": ["mode", "B"] + domains + ["avg"], "rows": err_rows},
        "memory": {"header": ["mode"] + [f"B={b}" for b in sizes], "rows": mem_rows},
        "degradation": {"header": ["mode", "B_small", "B_large", "delta_error"], "rows": deg_rows},
    }
    if budget is not None:
        report["budget"] = {"budget_bytes": budget,
                            "header": ["mode", "batch_size", "predicted_bytes", "cost_at_B1"],
                            "rows": [list(r) for r in budget_rows(summaries, budget, max(sizes))]}
    return report


def cmd_report(cfg: ExperimentConfig, out: Path, args) -> int:
    summaries = collect_summaries(args.runs)
    report = build_report(summaries, args.budget)
    for key, title in (("errors", "error % (per domain)"), ("memory", "analytic memory bytes"),
                       ("degradation", "batch-size degradation"), ("budget", "memory-budget mode")):
        if key in report:
            print(f"\n{title}")
            print(_table(report[key]["header"], report[key]["rows"]))
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report)
    (out / "report.csv").write_text(_csv_text(report["errors"]["header"], report["errors"]["rows"]),
                                    encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="foctta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"foctta {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="train the reference CNN on clean source data")
    p = sub.add_parser("warmup", parents=[common], help="profile layer importance and write a plan")
    p.add_argument("--checkpoint")
    p = sub.add_parser("adapt", parents=[common], help="run one continual adaptation stream")
    p.add_argument("--checkpoint")
    p.add_argument("--plan")
    p.add_argument("--mode")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--run-dir", help="where to write summary/log (default: --out)")
    p = sub.add_parser("sweep", parents=[common], help="adapt over a list of batch sizes and modes")
    p.add_argument("--checkpoint")
    p.add_argument("--plan")
    p.add_argument("--modes", nargs="+")
    p.add_argument("--batch-sizes", type=int, nargs="+")
    p = sub.add_parser("report", parents=[common], help="aggregate run summaries into tables")
    p.add_argument("runs", nargs="+", help="run directories or summary.json files")
    p.add_argument("--budget", type=int, help="memory budget in bytes: pick the largest feasible B")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "warmup": cmd_warmup, "adapt": cmd_adapt,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if getattr(args, "batch_size", None) is not None and args.batch_size < 1:
            raise ConfigError("--batch-size must be positive")
        out = Path(args.out or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FocttaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
