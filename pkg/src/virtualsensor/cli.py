"""Command-line front door: synth, train, transfer, eval, predict, plot.

Every command is a pure function of (input files, flags, seed) and writes a
run manifest alongside its outputs; wall-clock timings live only in the
manifest so the numeric outputs stay byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timedelta, timezone

import numpy as np

from .dataset import (
    apply_standardization,
    fill_prev_no2,
    load_dataset,
    standardize,
    write_locations_csv,
    write_readings_csv,
)
from .errors import VirtualSensorError
from .geograph import build_knn_graph
from .pipeline import (
    DEFAULT_MODEL_CONFIGS,
    EvalReport,
    TrainConfig,
    TransferConfig,
    TrainedModel,
    closed_loop_predict,
    improvement_table,
    leave_one_out,
    load_checkpoint,
    save_checkpoint,
    train,
    transfer,
)
from .sage import AggregatorKind, InitScheme, SageConfig
from .synthgen import CityConfig, generate_city


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, config: dict, seeds: list, inputs: list,
                    outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "output_paths": [str(p) for p in outputs],
        "wall_clock_s": time.monotonic() - started,
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _data_paths(data_dir):
    return os.path.join(data_dir, "locations.csv"), os.path.join(data_dir, "readings.csv")


def _load_raw(data_dir):
    loc_path, read_path = _data_paths(data_dir)
    return load_dataset(loc_path, read_path)


def _model_config(args, kind: str):
    cfg = DEFAULT_MODEL_CONFIGS[kind]()
    if kind == "sage" and getattr(args, "aggregator", None):
        cfg = replace(cfg, aggregator=AggregatorKind(args.aggregator))
    return cfg


def cmd_synth(args) -> int:
    started = time.monotonic()
    cfg = CityConfig(
        n_sensors=args.sensors,
        n_hours=args.hours,
        seed=args.seed,
        base_level=args.base,
        lag1_target=args.rho,
    )
    ds = generate_city(cfg)
    os.makedirs(args.out, exist_ok=True)
    loc_path, read_path = _data_paths(args.out)
    write_locations_csv(ds.locations, loc_path)
    write_readings_csv(ds, read_path)
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        "synth", asdict(cfg), [args.seed], [], [loc_path, read_path], started,
    )
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, lr=args.lr, patience=args.patience,
        seed=args.seed, model=args.model,
    )


def cmd_train(args) -> int:
    started = time.monotonic()
    if args.model == "gbt":
        raise VirtualSensorError(
            "gbt has no parameter checkpoint; run `eval --model gbt` instead"
        )
    raw = _load_raw(args.data)
    prepared, stats = standardize(fill_prev_no2(raw))
    g = build_knn_graph(raw.locations, k=args.k)
    cfg = _train_config(args)
    model_cfg = _model_config(args, args.model)
    trained = train(prepared, g, cfg, model_cfg)
    save_checkpoint(args.out, trained.params, stats, cfg, model_cfg)
    loc_path, read_path = _data_paths(args.data)
    _write_manifest(
        str(args.out) + ".manifest.json", "train",
        {"train": asdict(cfg), "k": args.k}, [args.seed],
        [loc_path, read_path], [args.out], started,
    )
    return 0


def cmd_transfer(args) -> int:
    started = time.monotonic()
    source_raw = _load_raw(args.source)
    target_raw = _load_raw(args.target)
    source_ds, _ = standardize(fill_prev_no2(source_raw))
    target_ds, target_stats = standardize(fill_prev_no2(target_raw))
    g_src = build_knn_graph(source_raw.locations, k=args.k)
    g_tgt = build_knn_graph(target_raw.locations, k=args.k)
    base_cfg = _train_config(args)
    tcfg = TransferConfig(
        source=base_cfg, finetune_epochs=args.finetune_epochs,
        finetune_lr=args.finetune_lr,
    )
    model_cfg = _model_config(args, args.model)
    tuned = transfer(source_ds, target_ds, (g_src, g_tgt), tcfg, model_cfg)
    ft_cfg = replace(base_cfg, epochs=max(args.finetune_epochs, 1), lr=args.finetune_lr)
    save_checkpoint(args.out, tuned.params, target_stats, ft_cfg, model_cfg)
    inputs = [*_data_paths(args.source), *_data_paths(args.target)]
    _write_manifest(
        str(args.out) + ".manifest.json", "transfer",
        {"train": asdict(base_cfg), "finetune_epochs": args.finetune_epochs,
         "finetune_lr": args.finetune_lr, "k": args.k},
        [args.seed], inputs, [args.out], started,
    )
    return 0


def cmd_eval(args) -> int:
    started = time.monotonic()
    if args.compare:
        base_path, new_path = args.compare
        with open(base_path, encoding="utf-8") as fh:
            base = EvalReport.from_dict(json.load(fh))
        with open(new_path, encoding="utf-8") as fh:
            new = EvalReport.from_dict(json.load(fh))
        table = improvement_table(base, new)
        lines = ["model,rmse,nrmse,grad_rmse"]
        for label, report in (("base", base), ("new", new)):
            avg = report.averages
            lines.append(
                f"{label}:{report.model},{avg['rmse']:.6f},{avg['nrmse']:.6f},{avg['grad_rmse']:.6f}"
            )
        lines.append(
            "improvement_pct,"
            f"{table['rmse']:.3f},{table['nrmse']:.3f},{table['grad_rmse']:.3f}"
        )
        text = "\n".join(lines) + "\n"
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            out_path = os.path.join(args.out, "improvement.csv")
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write(text)
            _write_manifest(
                os.path.join(args.out, "manifest.json"), "eval-compare", {},
                [], [base_path, new_path], [out_path], started,
            )
        sys.stdout.write(text)
        return 0

    if not args.data or not args.out:
        raise VirtualSensorError("eval needs --data and --out (or --compare)")
    raw = _load_raw(args.data)
    g = build_knn_graph(raw.locations, k=args.k)
    init_params = None
    if args.ckpt:
        params, _stats, cfg, model_cfg = load_checkpoint(args.ckpt)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.finetune_from_ckpt:
            init_params = params
    else:
        if not args.model:
            raise VirtualSensorError("eval needs --ckpt or --model")
        cfg = TrainConfig(
            epochs=args.epochs, lr=args.lr, patience=args.patience,
            seed=args.seed if args.seed is not None else 0, model=args.model,
        )
        model_cfg = _model_config(args, args.model)
    report = leave_one_out(raw, g, cfg, model_cfg, init_params=init_params)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "report.json")
    csv_path = os.path.join(args.out, "report.csv")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    inputs = list(_data_paths(args.data)) + ([args.ckpt] if args.ckpt else [])
    _write_manifest(
        os.path.join(args.out, "manifest.json"), "eval",
        {"train": asdict(cfg), "k": args.k}, [cfg.seed], inputs,
        [json_path, csv_path], started,
    )
    return 0


def _parse_init(text: str) -> InitScheme:
    if text == "actual":
        return InitScheme.actual_first()
    if text == "mean":
        return InitScheme.dataset_mean()
    if text.startswith("fixed:"):
        return InitScheme.fixed(float(text.split(":", 1)[1]))
    raise VirtualSensorError(f"bad --init value {text!r} (actual|mean|fixed:VALUE)")


def cmd_predict(args) -> int:
    started = time.monotonic()
    raw = _load_raw(args.data)
    params, stats, cfg, model_cfg = load_checkpoint(args.ckpt)
    prepared = apply_standardization(fill_prev_no2(raw), stats)
    g = build_knn_graph(raw.locations, k=args.k)
    node = raw.sensor_index(args.location)
    trained = TrainedModel(cfg.model, model_cfg, params)
    preds = closed_loop_predict(
        trained, g, prepared, node, _parse_init(args.init),
        rng=np.random.default_rng(cfg.seed),
    )
    preds = np.clip(preds, 0.0, None)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("timestamp,predicted_no2_ugm3\n")
        for t in range(1, raw.n_frames):
            ts = raw.timestamp(t).strftime("%Y-%m-%dT%H:00:00Z")
            fh.write(f"{ts},{preds[t - 1]:.6f}\n")
    _write_manifest(
        str(args.out) + ".manifest.json", "predict",
        {"location": args.location, "init": args.init, "k": args.k},
        [cfg.seed], [*_data_paths(args.data), args.ckpt], [args.out], started,
    )
    return 0


def _svg_plot(series: list[tuple[str, list[float]]], width=800, height=300) -> str:
    """Standalone SVG overlaying the given series as exactly one path each."""
    margin = 40
    all_vals = [v for _, vals in series for v in vals]
    lo, hi = min(all_vals), max(all_vals)
    if hi - lo < 1e-9:
        hi = lo + 1.0
    n = max(len(vals) for _, vals in series)
    colors = ("#1f77b4", "#d62728", "#2ca02c")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{margin}" y="{margin - 10}" font-size="12">NO2 ug/m3 '
        f'({lo:.1f}..{hi:.1f})</text>',
    ]
    for (label, vals), color in zip(series, colors):
        points = []
        for i, v in enumerate(vals):
            x = margin + (width - 2 * margin) * (i / max(n - 1, 1))
            y = height - margin - (height - 2 * margin) * ((v - lo) / (hi - lo))
            points.append(f"{'M' if i == 0 else 'L'}{x:.2f},{y:.2f}")
        parts.append(
            f'<path d="{" ".join(points)}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"><title>{label}</title></path>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    started = time.monotonic()
    raw = _load_raw(args.data)
    node = raw.sensor_index(args.location)
    with open(args.pred, encoding="utf-8") as fh:
        lines = fh.read().strip().splitlines()[1:]
    pred_by_ts = {}
    for line in lines:
        ts, value = line.split(",")
        pred_by_ts[ts] = float(value)

    start_t = 1
    if args.start:
        start_dt = datetime.fromisoformat(args.start.replace("Z", "+00:00"))
        if start_dt.tzinfo is None:
            start_dt = start_dt.replace(tzinfo=timezone.utc)
        start_t = max(1, int((start_dt - raw.start).total_seconds() // 3600))
    end_t = min(raw.n_frames, start_t + args.hours)

    actual, predicted = [], []
    for t in range(start_t, end_t):
        ts = raw.timestamp(t).strftime("%Y-%m-%dT%H:00:00Z")
        if ts in pred_by_ts and raw.present[t, node]:
            actual.append(float(raw.targets[t, node]))
            predicted.append(pred_by_ts[ts])
    if not actual:
        raise VirtualSensorError("no overlapping (actual, predicted) hours in window")
    svg = _svg_plot([("actual", actual), ("predicted", predicted)])
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    _write_manifest(
        str(args.out) + ".manifest.json", "plot",
        {"location": args.location, "start": args.start, "hours": args.hours},
        [], [*_data_paths(args.data), args.pred], [args.out], started,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="virtualsensor",
        description="Graph-based virtual air quality sensors for NO2",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city dataset")
    p.add_argument("--sensors", type=int, default=8)
    p.add_argument("--hours", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base", type=float, default=30.0)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--model", choices=("sage", "mlp", "cnn", "gbt"), default="sage")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--aggregator", choices=[a.value for a in AggregatorKind])
        p.add_argument("--k", type=int, default=3, help="k-NN graph degree")

    p = sub.add_parser("train", help="train a model on all sensors")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="pretrain on a source city, fine-tune on a target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.add_argument("--finetune-epochs", type=int, default=20)
    p.add_argument("--finetune-lr", type=float, default=1e-4)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="leave-one-location-out evaluation")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--model", choices=("sage", "mlp", "cnn", "gbt"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--aggregator", choices=[a.value for a in AggregatorKind])
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--finetune-from-ckpt", action="store_true",
                   help="seed each fold's training from the checkpoint parameters")
    p.add_argument("--compare", nargs=2, metavar=("BASE.json", "NEW.json"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="closed-loop prediction for one location")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--location", required=True)
    p.add_argument("--init", default="actual")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plot", help="SVG overlay of actual vs predicted NO2")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--location", required=True)
    p.add_argument("--start")
    p.add_argument("--hours", type=int, default=10**9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VirtualSensorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
