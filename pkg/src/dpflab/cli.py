"""Experiment runner: train / convexlab / report / retrain-ticket / finetune."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import convexlab
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_mask_history,
    mask_from_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    save_mask_history,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    build_dataset,
    build_model,
    build_train_config,
    canonical_json,
    load_config,
    parse_config,
)
from .metrics import emit, last_change_curve
from .nets import NumericalFailure, evaluate
from .pruning import Mask
from .training import TrainResult, finetune, lottery_retrain, make_state, run_training

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _summary(cfg: ExperimentConfig, data, result: TrainResult) -> dict:
    final = result.records[-1] if result.records else None
    nonzero = int(np.count_nonzero(result.sparse))
    return {
        "run_id": cfg["run_id"],
        "strategy": cfg["train.strategy"],
        "seed": cfg["train.seed"],
        "epochs": cfg["train.epochs"] + cfg["train.finetune_epochs"],
        "steps_per_epoch": result.steps_per_epoch,
        "final": None if final is None else {
            "train_loss": final.train_loss,
            "train_acc": final.train_acc,
            "test_loss": final.test_loss,
            "test_acc": final.test_acc,
        },
        "sparsity_target": cfg["sparsity.final"],
        "sparsity_achieved": result.mask.sparsity,
        "param_count": int(result.dense.size),
        "prunable_count": int(result.mask.n_prunable),
        "nonzero_count": nonzero,
        "grad_norm_max": result.grad_norm_max,
    }


def _write_run(out_dir: Path, cfg: ExperimentConfig, data, model, result: TrainResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(canonical_json(cfg), encoding="utf-8")
    emit(result.records, out_dir / "metrics.csv", "csv")
    save_mask_history(out_dir / "masks.bin", result.mask_history)
    seed = cfg["train.seed"]
    total_epochs = cfg["train.epochs"] + cfg["train.finetune_epochs"]
    for name, params in (("final_dense.dpfc", result.dense), ("final_sparse.dpfc", result.sparse)):
        save_checkpoint(out_dir / name, Checkpoint(
            layers=model.layers, params=params, momentum=result.state.v,
            mask_bits=np.asarray(result.mask.bits), step=result.state.t,
            seed=seed, next_epoch=total_epochs,
        ))
    summary = _summary(cfg, data, result)
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_train_inputs(args) -> tuple[ExperimentConfig, Path]:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        raw["train.seed"] = args.seed
        raw.pop("run_id", None)  # derived run ids track the overridden seed
    cfg = parse_config(raw)
    out_root = Path(args.out) if args.out else Path("runs")
    return cfg, out_root


def _train_one(config_path: str, out: str | None, seed: int | None,
               resume: str | None = None, stop_epoch: int | None = None) -> int:
    ns = argparse.Namespace(config=config_path, out=out, seed=seed)
    try:
        cfg, out_root = _load_train_inputs(ns)
        data = build_dataset(cfg)
        model = build_model(cfg, data)
        tc = build_train_config(cfg, data)
        resume_state, start_epoch = None, 0
        if resume is not None:
            ckpt = load_checkpoint(resume)
            model = model_from_checkpoint(ckpt)
            mask = Mask(ckpt.mask_bits.copy(), model.prunable)
            resume_state = make_state(ckpt.params.copy(), ckpt.momentum.copy(), mask, ckpt.step)
            start_epoch = ckpt.next_epoch
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_CONFIG)

    run_dir = out_root / cfg["run_id"]
    epochs = tc.epochs if stop_epoch is None else min(stop_epoch, tc.epochs)
    partial = epochs < tc.epochs
    run_cfg = tc if not partial else replace(tc, epochs=epochs, finetune_epochs=0)

    hook = None
    every = cfg["checkpoint_every"]
    if every > 0:
        def hook(epoch, state):
            if (epoch + 1) % every == 0:
                run_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(run_dir / f"checkpoint_epoch{epoch + 1}.dpfc", Checkpoint(
                    layers=model.layers, params=state.x, momentum=state.v,
                    mask_bits=np.asarray(state.mask.bits), step=state.t,
                    seed=tc.seed, next_epoch=epoch + 1,
                ))

    try:
        result = run_training(model, data, run_cfg, resume_state=resume_state,
                              start_epoch=start_epoch, finalize=not partial, on_epoch_end=hook)
    except NumericalFailure as exc:
        return _fail(str(exc), EXIT_NUMERIC)

    if partial:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = run_dir / f"checkpoint_epoch{epochs}.dpfc"
        save_checkpoint(ckpt_path, Checkpoint(
            layers=model.layers, params=result.state.x, momentum=result.state.v,
            mask_bits=np.asarray(result.state.mask.bits), step=result.state.t,
            seed=tc.seed, next_epoch=epochs,
        ))
        print(f"stopped after epoch {epochs}, checkpoint at {ckpt_path}")
        return EXIT_OK

    _write_run(run_dir, cfg, data, model, result)
    if result.records:
        last = result.records[-1]
        print(f"{cfg['run_id']}: test_acc={last.test_acc:.4f} sparsity={result.mask.sparsity:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.grid:
        return _run_grid(args)
    return _train_one(args.config, args.out, args.seed, args.resume, args.stop_epoch)


def _run_grid(args) -> int:
    try:
        with open(args.grid, encoding="utf-8") as fh:
            grid = json.load(fh)
        paths = grid["configs"]
        if not isinstance(paths, list) or not paths:
            raise KeyError("configs")
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(f"{args.grid}: expected {{\"configs\": [paths...]}} ({exc})", EXIT_CONFIG)
    base = Path(args.grid).parent
    resolved = [str((base / p)) if not Path(p).is_absolute() else p for p in paths]
    workers = int(os.environ.get("DPFLAB_THREADS", os.cpu_count() or 1))
    workers = max(1, min(workers, len(resolved)))
    codes = []
    if workers == 1:
        codes = [_train_one(p, args.out, args.seed) for p in resolved]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_one, p, args.out, args.seed) for p in resolved]
            codes = [f.result() for f in futures]
    return max(codes) if codes else EXIT_CONFIG


_CONVEXLAB_DEFAULTS = {
    "mode": "strongly_convex",   # strongly_convex | nonconvex | one_shot
    "dim": 50,
    "mu": 1.0,
    "lip": 100.0,
    "noise_sigma": 1.0,
    "coupling": 0.1,
    "sparsity": 0.0,
    "horizons": [100, 1000, 10000],
    "seeds": [0, 1, 2, 3, 4],
    "period": 16,
    "problem_seed": 0,
}


def cmd_convexlab(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = sorted(set(raw) - set(_CONVEXLAB_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown convexlab keys: {', '.join(unknown)}")
        cfg = {**_CONVEXLAB_DEFAULTS, **raw}
        if cfg["mode"] not in ("strongly_convex", "nonconvex", "one_shot"):
            raise ConfigError(f"unknown mode {cfg['mode']!r}")
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        return _fail(str(exc), EXIT_CONFIG)

    out_dir = Path(args.out) if args.out else Path("convexlab-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    mode, sparsity, period = cfg["mode"], cfg["sparsity"], cfg["period"]
    records, per_horizon = [], {}

    if mode == "one_shot":
        problem = convexlab.make_quadratic(cfg["dim"], cfg["mu"], cfg["lip"], cfg["problem_seed"], cfg["noise_sigma"])
        T = int(cfg["horizons"][-1])
        for seed in cfg["seeds"]:
            cmp = convexlab.compare_one_shot(problem, sparsity, T, seed, period)
            records.append({
                "T": T, "seed": seed, "sparsity": sparsity,
                "one_shot_value": cmp.one_shot_value, "feedback_value": cmp.feedback_value,
                "one_shot_pruning_term": cmp.one_shot_pruning_term,
                "feedback_pruning_term": cmp.feedback_pruning_term,
            })
        summary = {
            "mode": mode, "T": T, "sparsity": sparsity,
            "seeds_one_shot": list(cfg["seeds"]), "seeds_feedback": list(cfg["seeds"]),
            "one_shot_median": float(np.median([r["one_shot_value"] for r in records])),
            "feedback_median": float(np.median([r["feedback_value"] for r in records])),
            "slope": None,
        }
    else:
        if mode == "strongly_convex":
            problem = convexlab.make_quadratic(cfg["dim"], cfg["mu"], cfg["lip"], cfg["problem_seed"], cfg["noise_sigma"])
            runner = convexlab.run_strongly_convex_rate
        else:
            problem = convexlab.make_double_well(cfg["dim"], cfg["coupling"], cfg["noise_sigma"])
            runner = convexlab.run_nonconvex_rate
        for T in cfg["horizons"]:
            vals = []
            for seed in cfg["seeds"]:
                res = runner(problem, sparsity, int(T), seed, period)
                records.append({
                    "T": int(T), "seed": seed, "sparsity": sparsity,
                    "value": res.sampled_value, "pruning_term": res.avg_pruning_term,
                    "g_max": res.g_max, "diverged": res.diverged,
                })
                vals.append(res.sampled_value)
            per_horizon[int(T)] = float(np.median(vals))
        slope = convexlab.fit_loglog_slope(list(per_horizon), list(per_horizon.values()))
        summary = {"mode": mode, "sparsity": sparsity, "medians": per_horizon, "slope": slope}

    (out_dir / "convexlab_runs.json").write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
    (out_dir / "convexlab_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    runs = sorted(p for p in root.glob("*/summary.json"))
    if not runs:
        return _fail(f"{root}: no run summaries found", EXIT_CONFIG)
    by_strategy: dict[str, list[dict]] = {}
    for path in runs:
        summary = json.loads(path.read_text(encoding="utf-8"))
        by_strategy.setdefault(summary["strategy"], []).append(summary)

    lines = ["strategy,runs,test_acc_mean,test_acc_std"]
    for strategy in sorted(by_strategy):
        accs = []
        for s in by_strategy[strategy]:
            final = s.get("final") or {}
            acc = final.get("test_acc")
            if acc is None or not math.isfinite(acc):
                acc = final.get("train_acc", float("nan"))
            accs.append(acc)
        mean = float(np.mean(accs))
        std = 0.0 if len(accs) < 2 else float(np.std(accs, ddof=1))
        lines.append(f"{strategy},{len(accs)},{mean:.17g},{std:.17g}")
        print(f"{strategy}: n={len(accs)} test_acc={mean:.4f} +- {std:.4f}")
    (root / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    curve_lines = ["strategy,epoch,fraction"]
    for strategy in sorted(by_strategy):
        curves = []
        for s in by_strategy[strategy]:
            masks = root / s["run_id"] / "masks.bin"
            if not masks.exists():
                continue
            try:
                history = load_mask_history(masks)
                curves.append(last_change_curve(history, s["epochs"], s["steps_per_epoch"]))
            except (OSError, ValueError, KeyError) as exc:
                print(f"warning: skipping {masks}: {exc}", file=sys.stderr)
        if not curves:
            continue
        n = min(len(c) for c in curves)
        merged = np.mean([c[:n] for c in curves], axis=0)
        for e, frac in enumerate(merged):
            curve_lines.append(f"{strategy},{e},{frac:.17g}")
    (root / "last_change.csv").write_text("\n".join(curve_lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_retrain_ticket(args) -> int:
    run_dir = Path(args.run)
    try:
        cfg = load_config(run_dir / "config.json")
        ckpt = load_checkpoint(run_dir / "final_dense.dpfc")
        mask = mask_from_checkpoint(ckpt)
        data = build_dataset(cfg)
        tc = build_train_config(cfg, data)
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    try:
        params = lottery_retrain(ckpt.layers, mask, args.init_seed, data, tc)
    except NumericalFailure as exc:
        return _fail(str(exc), EXIT_NUMERIC)

    model = model_from_checkpoint(ckpt)
    train_loss, train_acc = evaluate(model, params, data.train_inputs, data.train_labels)
    test_loss = test_acc = float("nan")
    if data.has_test:
        test_loss, test_acc = evaluate(model, params, data.test_inputs, data.test_labels)
    source = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    out_dir = Path(args.out) if args.out else run_dir / f"ticket-seed{args.init_seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "ticket.dpfc", Checkpoint(
        layers=ckpt.layers, params=params, momentum=np.zeros_like(params),
        mask_bits=np.asarray(mask.bits), step=0, seed=args.init_seed, next_epoch=tc.epochs,
    ))
    comparison = {
        "init_seed": args.init_seed,
        "ticket": {"train_loss": train_loss, "train_acc": train_acc,
                   "test_loss": test_loss, "test_acc": test_acc,
                   "sparsity": mask.sparsity},
        "source": source.get("final"),
        "source_run": source.get("run_id"),
    }
    (out_dir / "comparison.json").write_text(json.dumps(comparison, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"ticket retrain test_acc={test_acc:.4f} (source {source.get('final', {}).get('test_acc')})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    run_dir = Path(args.run)
    try:
        cfg = load_config(run_dir / "config.json")
        ckpt = load_checkpoint(run_dir / "final_sparse.dpfc")
        mask = mask_from_checkpoint(ckpt)
        data = build_dataset(cfg)
        tc = replace(build_train_config(cfg, data), finetune_epochs=args.epochs,
                     finetune_lr=args.lr)
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    model = model_from_checkpoint(ckpt)
    try:
        params = finetune(model, ckpt.params.copy(), mask, data, tc)
    except NumericalFailure as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    train_loss, train_acc = evaluate(model, params, data.train_inputs, data.train_labels)
    test_loss = test_acc = float("nan")
    if data.has_test:
        test_loss, test_acc = evaluate(model, params, data.test_inputs, data.test_labels)
    out_dir = Path(args.out) if args.out else run_dir / f"finetune{args.epochs}"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "finetuned.dpfc", Checkpoint(
        layers=ckpt.layers, params=params, momentum=np.zeros_like(params),
        mask_bits=np.asarray(mask.bits), step=ckpt.step, seed=ckpt.seed,
        next_epoch=ckpt.next_epoch + args.epochs,
    ))
    summary = {"epochs": args.epochs, "train_loss": train_loss, "train_acc": train_acc,
               "test_loss": test_loss, "test_acc": test_acc, "sparsity": mask.sparsity}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"finetune test_acc={test_acc:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpflab", description="Sparse training experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training config (or a grid)")
    p_train.add_argument("--config", help="experiment config (JSON, flat dotted keys)")
    p_train.add_argument("--out", help="output root directory (default: runs)")
    p_train.add_argument("--seed", type=int, help="override train.seed")
    p_train.add_argument("--grid", help="JSON file {\"configs\": [paths...]} run in a worker pool")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--stop-epoch", type=int, dest="stop_epoch",
                         help="stop after this many epochs and write a checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_lab = sub.add_parser("convexlab", help="convergence-rate experiments on synthetic objectives")
    p_lab.add_argument("--config", required=True)
    p_lab.add_argument("--out")
    p_lab.set_defaults(func=cmd_convexlab)

    p_rep = sub.add_parser("report", help="aggregate run summaries into plot-ready CSV")
    p_rep.add_argument("dir")
    p_rep.set_defaults(func=cmd_report)

    p_ticket = sub.add_parser("retrain-ticket", help="reinitialize and retrain with a found mask")
    p_ticket.add_argument("--run", required=True, help="source run directory")
    p_ticket.add_argument("--init-seed", type=int, required=True, dest="init_seed")
    p_ticket.add_argument("--out")
    p_ticket.set_defaults(func=cmd_retrain_ticket)

    p_ft = sub.add_parser("finetune", help="fine-tune a finished run on its fixed mask")
    p_ft.add_argument("--run", required=True)
    p_ft.add_argument("--epochs", type=int, required=True)
    p_ft.add_argument("--lr", type=float)
    p_ft.add_argument("--out")
    p_ft.set_defaults(func=cmd_finetune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train" and not args.config and not args.grid:
        return _fail("train needs --config or --grid", EXIT_CONFIG)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
