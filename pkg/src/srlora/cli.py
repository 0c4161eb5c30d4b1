"""Command-line entry point: analyze, plan, train, correlate, spectrum."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bundle import ADAPTER_ROLES, load_bundle, save_bundle
from .errors import ConstantInput, MissingWeight, SrLoraError
from .linalg import effective_rank, frobenius_norm, pearson, spectral_norm, stable_rank
from .nn.model import ModelConfig, ToyTransformer, extract_feature_spectrum
from .planner import budget_report, make_plan
from .synth import TaskSpec, generate
from .trainer import ADAPTER_MODES, TrainConfig, pretrain, train, write_report

ANALYZE_COLUMNS = ["layer", "role", "d", "k", "frobenius", "spectral", "stable_rank", "effective_rank"]
SPECTRUM_COLUMNS = ["index", "singular_value", "relative", "above_threshold"]


class CliError(Exception):
    pass


def _out_path(args, explicit: str | None, default_name: str) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        path = Path(args.out_dir or ".") / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def cmd_analyze(args) -> int:
    bundle = load_bundle(args.checkpoint)
    threshold = 1e-6 if args.threshold is None else args.threshold
    seed = _seed(args)
    out = _out_path(args, args.out, "analysis.csv")
    entries = [e for e in bundle.entries()
               if e.layer is not None and len(e.shape) == 2 and e.role not in ADAPTER_ROLES]

    def analyze_one(e):
        w = e.array
        try:
            return [e.layer, e.role, e.shape[0], e.shape[1], repr(frobenius_norm(w)),
                    repr(spectral_norm(w, seed=seed)), repr(stable_rank(w, seed=seed)),
                    effective_rank(w, threshold)]
        except SrLoraError as exc:
            raise CliError(f"tensor {e.name!r}: {exc}") from exc

    # each row depends only on its own tensor and seed; map() keeps manifest order
    with ThreadPoolExecutor(max_workers=min(8, os.cpu_count() or 1)) as pool:
        rows = list(pool.map(analyze_one, entries))
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANALYZE_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _print_budget(report: dict) -> None:
    print(f"strategy          {report['strategy']}")
    print(f"total trainable   {report['total_trainable']}")
    print(f"backbone total    {report['backbone_total']}")
    print(f"trainable ratio   {100 * report['trainable_ratio']:.4f}%")
    if report["head_params"]:
        print(f"ratio with head   {100 * report['trainable_ratio_with_head']:.4f}%")
    for key in report["clamped"]:
        print(f"clamped           {key}")
    print("layer  params  ranks")
    for row in report["per_layer"]:
        ranks = " ".join(f"{role}={r}" for role, r in row["ranks"].items())
        print(f"{row['layer']:>5}  {row['params']:>6}  {ranks}")


def cmd_plan(args) -> int:
    bundle = load_bundle(args.checkpoint)
    plan = make_plan(bundle, args.strategy, args.rounding, seed=_seed(args))
    out = _out_path(args, args.out, "plan.json")
    out.write_text(plan.to_json())
    _print_budget(budget_report(plan))
    return 0


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a JSON object")
    return doc


def _default_strategy(train_cfg: TrainConfig) -> str:
    if train_cfg.mode == "lora_fixed":
        return f"fixed:{train_cfg.fixed_rank}"
    return "stable"


def _run_mode(backbone, task, train_cfg: TrainConfig, strategy: str, rounding: str, bundle, head_seed):
    model = backbone.copy()
    model.attach_classifier(task.spec.num_classes, head_seed)
    plan = make_plan(bundle, strategy, rounding) if train_cfg.mode in ADAPTER_MODES else None
    return model, train(model, task, plan, train_cfg)


def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out_dir = Path(args.out_dir or cfg.get("out_dir") or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        task_spec = TaskSpec(**{"seed": seed, **cfg.get("task", {})})
        model_cfg = ModelConfig(**{"seed": seed, **cfg.get("model", {}), "seq_len": task_spec.seq_len,
                                   "input_dim": task_spec.input_dim, "num_classes": task_spec.num_classes})
        train_cfg = TrainConfig.from_dict({"seed": seed, **cfg.get("train", {})})
        pre_cfg = {"epochs": 2, "batch_size": 32, "lr0": 1e-3, "weight_decay": 5e-2, **cfg.get("pretrain", {})}
        strategy = cfg.get("strategy") or _default_strategy(train_cfg)
        rounding = cfg.get("rounding", "ceil")
        compare = list(cfg.get("compare", []))
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config {args.config}: {exc}") from exc

    task = generate(task_spec)
    model = ToyTransformer(model_cfg)
    if pre_cfg["epochs"] > 0:
        pretrain(model, task.pretrain, epochs=pre_cfg["epochs"], batch_size=pre_cfg["batch_size"],
                 lr0=pre_cfg["lr0"], weight_decay=pre_cfg["weight_decay"], seed=seed)
    # round-trip through the bundle so plan and training see identical float32-grid weights
    save_bundle(model.to_bundle(include_adapters=False), out_dir / "backbone")
    bundle = load_bundle(out_dir / "backbone")
    backbone = ToyTransformer.from_bundle(bundle)

    if train_cfg.mode in ADAPTER_MODES:
        (out_dir / "plan.json").write_text(make_plan(bundle, strategy, rounding).to_json())
    model, report = _run_mode(backbone, task, train_cfg, strategy, rounding, bundle, seed)

    rows = [_comparison_row(train_cfg.mode, strategy if train_cfg.mode in ADAPTER_MODES else None, report)]
    baseline = None
    for item in compare:
        extra = TrainConfig.from_dict({**asdict(train_cfg), "mode": item, "spu": None})
        extra_strategy = f"fixed:{extra.fixed_rank}" if extra.mode == "lora_fixed" else "stable"
        _, other = _run_mode(backbone, task, extra, extra_strategy, rounding, bundle, seed)
        rows.append(_comparison_row(extra.mode, extra_strategy if extra.mode in ADAPTER_MODES else None, other))
        if extra.mode == "full_ft":
            baseline = other
    if compare:
        report.extras["comparison"] = rows
    if baseline is not None:
        report.extras["correlation"] = {
            "delta_rank": baseline.mean_delta_rank,
            "metric_gain": report.test_metric - baseline.test_metric,
        }

    write_report(report, out_dir)
    save_bundle(model.to_bundle(include_adapters=True), out_dir / "model")
    save_bundle(task.to_bundle(), out_dir / "dataset")
    print(f"mode {report.mode}: train loss {report.initial_train_loss:.4f} -> {report.final_train_loss:.4f}, "
          f"best epoch {report.best_epoch}, val {report.best_val_metric:.4f}, test {report.test_metric:.4f}")
    print(f"wall time {report.wall_time:.2f} s; outputs in {out_dir}")
    return 0


def _comparison_row(mode: str, strategy: str | None, report) -> dict:
    return {
        "mode": mode,
        "strategy": strategy,
        "trainable_params": report.trainable_params,
        "best_val_metric": report.best_val_metric,
        "test_metric": report.test_metric,
        "final_train_loss": report.final_train_loss,
        "mean_delta_rank": report.mean_delta_rank,
    }


def cmd_correlate(args) -> int:
    paths = sorted(glob.glob(args.reports, recursive=True))
    rows = []
    for path in paths:
        doc = _load_json(path)
        pair = doc.get("correlation")
        if not isinstance(pair, dict) or "delta_rank" not in pair or "metric_gain" not in pair:
            continue
        rows.append({"report": path, "delta_rank": float(pair["delta_rank"]),
                     "metric_gain": float(pair["metric_gain"])})
    if len(rows) < 2:
        raise CliError(f"need at least 2 reports with correlation pairs, found {len(rows)} "
                       f"among {len(paths)} files matching {args.reports!r}")
    try:
        r = pearson([row["delta_rank"] for row in rows], [row["metric_gain"] for row in rows])
    except ConstantInput as exc:
        raise CliError(f"cannot correlate: {exc}") from exc
    out = _out_path(args, args.out, "correlation.json")
    out.write_text(json.dumps({"pearson": r, "n": len(rows), "rows": rows}, indent=2) + "\n")
    print(f"pearson r = {r:.6f} over {len(rows)} runs")
    return 0


def cmd_spectrum(args) -> int:
    model = ToyTransformer.from_bundle(load_bundle(args.checkpoint))
    data = load_bundle(args.dataset)
    name = f"{args.split}.inputs"
    if name in data:
        inputs = data[name]
    else:
        candidates = data.by_role("input")
        if not candidates:
            raise CliError(f"dataset {args.dataset} has no input tensor")
        inputs = candidates[0].array
    c = model.config
    if inputs.ndim != 3 or inputs.shape[1:] != (c.seq_len, c.input_dim):
        raise CliError(f"dataset inputs {inputs.shape} do not match model input "
                       f"(N, {c.seq_len}, {c.input_dim})")
    threshold = 1e-3 if args.threshold is None else args.threshold
    spec = extract_feature_spectrum(model, inputs, rel_threshold=threshold)
    top = spec.singular_values[0]
    out = _out_path(args, args.out, "spectrum.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPECTRUM_COLUMNS)
        for i, s in enumerate(spec.singular_values):
            rel = s / top if top > 0 else 0.0
            writer.writerow([i, repr(float(s)), repr(float(rel)), int(s > threshold * top)])
    print(f"{spec.count_above} of {len(spec.singular_values)} singular values above {threshold:g} * sigma_1")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srlora", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    parser.add_argument("--out-dir", default=None, help="directory for outputs without an explicit path")
    parser.add_argument("--threshold", type=float, default=None,
                        help="relative singular-value threshold (analyze: 1e-6, spectrum: 1e-3)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="per-matrix norms and ranks of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="allocate adapter ranks and report the parameter budget")
    p.add_argument("checkpoint")
    p.add_argument("--strategy", default="stable", help="'stable' or 'fixed:R'")
    p.add_argument("--rounding", default="ceil", choices=["ceil", "floor", "nearest"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="synthesize a task, plan ranks and fine-tune")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correlate", help="Pearson correlation of update rank vs metric gain")
    p.add_argument("reports", help="glob matching report.json files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("spectrum", help="singular values of pre-classifier features")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingWeight as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (CliError, SrLoraError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
