"""Command-line entry points: train, eval, ablate, bench, robustness, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from .geometry import make_dataset
from .io import (ConfigError, RunConfig, WeightFileError, atomic_write, load_into, load_run_config,
                 round_to_f32, save_weights)
from .models import EXPERIMENTS, build_model
from .training import evaluate, robustness_curve, train_classifier

log = logging.getLogger("pcgnn")

WEIGHTS_NAME = "weights.pcgw"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out = args.out
    return cfg


# -- commands ----------------------------------------------------------------


def train_run(cfg: RunConfig, experiment: str | None = None):
    """Train one model; returns ``(model, history, test metrics)``.

    The model is rounded to 32-bit before the final evaluation so the metrics
    match what a later ``eval`` of the saved weights reports.
    """
    train, test = make_dataset(cfg.dataset, cfg.seed)
    model_cfg = cfg.model_config(experiment)
    model, history = train_classifier(model_cfg, (train, test), cfg.hyper)
    round_to_f32(model)
    return model, history, evaluate(model, test)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    model, history, metrics = train_run(cfg)
    save_weights(model, out / WEIGHTS_NAME)
    atomic_write(out / "history.csv", _csv(
        ["epoch", "loss", "train_oa", "test_oa"],
        [[r.epoch, _f(r.loss), _f(r.train_oa), _f(r.test_oa)] for r in history]))
    atomic_write(out / "metrics.csv", _csv(["split", "oa", "macc"], [["test", _f(metrics.oa), _f(metrics.macc)]]))
    print(f"test OA {metrics.oa:.4f}  mAcc {metrics.macc:.4f}  -> {out}")
    return 0


def _load_model(cfg: RunConfig, weights: str | None):
    path = Path(weights) if weights else Path(cfg.out) / WEIGHTS_NAME
    if not path.is_file():
        raise FileNotFoundError(f"missing weight file {path}")
    model = build_model(cfg.model_config())
    load_into(model, path)
    return model


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _load_model(cfg, args.weights)
    _, test = make_dataset(cfg.dataset, cfg.seed)
    metrics = evaluate(model, test)
    out = Path(cfg.out)
    atomic_write(out / "eval_metrics.csv", _csv(["split", "oa", "macc"],
                                                [["test", _f(metrics.oa), _f(metrics.macc)]]))
    print(f"test OA {metrics.oa:.4f}  mAcc {metrics.macc:.4f}")
    return 0


def ablate(cfg: RunConfig, seeds, experiments=EXPERIMENTS, on_model=None) -> list[dict]:
    """Train every experiment preset for every seed; one dict per run.

    ``on_model(experiment, seed, model)`` is called after each run if given.
    """
    rows = []
    for exp in experiments:
        for seed in seeds:
            run_cfg = cfg.with_seed(seed)
            model, _, m = train_run(run_cfg, exp)
            if on_model is not None:
                on_model(exp, seed, model)
            rows.append({"experiment": exp, "seed": seed, "oa": m.oa, "macc": m.macc})
            log.info("%s seed %d: OA %.4f", exp, seed, m.oa)
    return rows


def seed_means(rows: list[dict]) -> dict[str, dict]:
    out = {}
    for exp in dict.fromkeys(r["experiment"] for r in rows):
        sub = [r for r in rows if r["experiment"] == exp]
        out[exp] = {"oa": float(np.mean([r["oa"] for r in sub])),
                    "macc": float(np.mean([r["macc"] for r in sub])), "runs": len(sub)}
    return out


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    exps = args.experiments or list(EXPERIMENTS)
    rows = ablate(cfg, seeds, exps)
    means = seed_means(rows)
    table = [[r["experiment"], r["seed"], _f(r["oa"]), _f(r["macc"])] for r in rows]
    table += [[e, "mean", _f(m["oa"]), _f(m["macc"])] for e, m in means.items()]
    out = Path(cfg.out)
    atomic_write(out / "ablation.csv", _csv(["experiment", "seed", "oa", "macc"], table))
    ranked = sorted(means.items(), key=lambda kv: (-kv[1]["oa"], kv[0]))
    md = ["| rank | experiment | mean OA | mean mAcc | seeds |", "|---|---|---|---|---|"]
    md += [f"| {i} | {e} | {m['oa']:.4f} | {m['macc']:.4f} | {m['runs']} |" for i, (e, m) in enumerate(ranked, 1)]
    atomic_write(out / "ablation.md", "\n".join(md) + "\n")
    print("\n".join(md))
    return 0


def cmd_bench(args) -> int:
    cases = bench.BENCH_PRESETS[args.preset]
    results = bench.run_cases(cases, repeats=args.repeats, timing=not args.no_timing)
    paths = bench.emit_report(results, args.out or "bench", stem=args.preset)
    print(paths["md"].read_text())
    return 0


def cmd_robustness(args) -> int:
    cfg = _config(args)
    if args.weights or (Path(cfg.out) / WEIGHTS_NAME).is_file():
        model = _load_model(cfg, args.weights)
    else:
        model, _, _ = train_run(cfg)
        save_weights(model, Path(cfg.out) / WEIGHTS_NAME)
    _, test = make_dataset(cfg.dataset, cfg.seed)
    curve = robustness_curve(model, test, cfg.fractions, cfg.seed)
    atomic_write(Path(cfg.out) / "robustness.csv", _csv(["fraction", "oa"], [[f"{f:.4f}", _f(oa)] for f, oa in curve]))
    for f, oa in curve:
        print(f"drop {f:.2f}: OA {oa:.4f}")
    return 0


def cmd_report(args) -> int:
    raw = Path(args.raw)
    results = bench.results_from_raw(json.loads(raw.read_text(encoding="utf-8")))
    rows = bench.report_rows(results)
    out = Path(args.out) if args.out else raw.with_name(raw.name.replace("_raw.json", "") + ".md")
    atomic_write(out, bench.rows_to_markdown(rows))
    print(out.read_text())
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcgnn", description="Point-cloud graph network experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train one model and save its weights")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate saved weights on the test split")
    common(sp)
    sp.add_argument("--weights", help="weight file (default: <out>/weights.pcgw)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train every experiment preset over several seeds")
    common(sp)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--experiments", nargs="+", choices=EXPERIMENTS)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="layer memory/OP accounting and timing")
    sp.add_argument("--preset", choices=sorted(bench.BENCH_PRESETS), default="memory-ratio")
    sp.add_argument("--repeats", type=int, default=30)
    sp.add_argument("--no-timing", action="store_true")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("robustness", help="accuracy versus fraction of dropped points")
    common(sp)
    sp.add_argument("--weights", help="weight file; trains a model when absent")
    sp.set_defaults(func=cmd_robustness)

    sp = sub.add_parser("report", help="rebuild a benchmark Markdown table from raw samples")
    sp.add_argument("raw", help="<stem>_raw.json written by bench")
    sp.add_argument("--out", help="Markdown path (default next to the raw file)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("PCGNN_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (ConfigError, WeightFileError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
