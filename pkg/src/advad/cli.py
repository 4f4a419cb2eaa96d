"""Operator entry point: train, attack, verify, bench, compare.

Every command is deterministic under fixed ``--seed`` and precision, emits
machine-readable JSON next to its human-readable output, and uses the exit
code contract 0 = success, 1 = verification failure, 2 = usage error,
3 = runtime error. Timing fields live under ``timing`` / ``wall_clock_s``
keys only, so reports from identical runs are byte-identical once those are
stripped (see ``strip_timing``).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import BaselineConfig, pgd_attack, pgd_decay_attack
from .data import Dataset, gen_synthetic, load_png_dir, manifest, train_test_split
from .engine import (AttackConfig, MODE_ADVAD, MODE_ADVADX, run_attack,
                     save_deep_trace, write_step_records)
from .imagecore import write_png, write_raw_float
from .metrics import asr, measure
from .model import BuiltinCnn, DivergenceError, train_reference
from .schedule import make_schedule
from .verify import decay_stats, verify_trace

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

DEFAULT_NUM_CLASSES = 2
DEFAULT_PER_CLASS = 500
DEFAULT_SIZE = 32
DEFAULT_EPOCHS = 40
DEFAULT_LR = 0.3

BASELINE_MODES = ("pgd", "pgd-decay")


class UsageError(ValueError):
    pass


def strip_timing(report: dict) -> dict:
    """Drop wall-clock fields; what remains is run-content only and must be
    byte-identical across reruns of the same seeded command."""
    out = copy.deepcopy(report)
    out.pop("timing", None)
    for row in out.get("images", []):
        row.pop("wall_clock_s", None)
    return out


def _write_json(obj: dict, path: Path):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _dataset_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or a directory of <label>/<name>.png")
    p.add_argument("--num-classes", type=int, default=DEFAULT_NUM_CLASSES)
    p.add_argument("--per-class", type=int, default=DEFAULT_PER_CLASS)
    p.add_argument("--size", type=int, default=DEFAULT_SIZE)
    p.add_argument("--data-seed", type=int, default=0)


def _load_dataset(args) -> Dataset:
    if args.dataset == "synthetic":
        return gen_synthetic(args.num_classes, args.per_class, args.size,
                             seed=args.data_seed)
    return load_png_dir(args.dataset)


def _select_images(dataset: Dataset, split: str, seed: int, limit: int | None):
    if split == "all":
        samples = dataset.samples
    else:
        train, test, _ = train_test_split(dataset, seed=seed)
        samples = test.samples if split == "test" else train.samples
    if limit is not None:
        samples = samples[:limit]
    return samples


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args)
    t0 = time.perf_counter()
    model = train_reference(dataset, epochs=args.epochs, learning_rate=args.lr,
                            seed=args.seed, batch_size=args.batch_size,
                            log_path=out / "training_log.jsonl")
    elapsed = time.perf_counter() - t0
    model.save(out / "model.advm")
    summary = dict(model.training_summary)
    report = {
        "command": "train",
        "config": {"dataset": args.dataset, "num_classes": dataset.num_classes,
                   "per_class": args.per_class, "size": args.size,
                   "data_seed": args.data_seed, "epochs": args.epochs,
                   "lr": args.lr, "seed": args.seed, "batch_size": args.batch_size},
        "model_file": "model.advm",
        "parameter_count": model.parameter_count,
        "train_accuracy": summary["train_accuracy"],
        "test_accuracy": summary["test_accuracy"],
        "split": summary["split"],
        "timing": {"total_s": elapsed},
    }
    _write_json(report, out / "train_report.json")
    print(f"trained on {len(dataset.samples)} images "
          f"({dataset.num_classes} classes, {args.epochs} epochs)")
    print(f"train accuracy {summary['train_accuracy']:.4f}  "
          f"test accuracy {summary['test_accuracy']:.4f}")
    print(f"checkpoint: {out / 'model.advm'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack

def _attack_one(method, classifier, img, label, idx, cfg, bl_cfg, schedule):
    t0 = time.perf_counter()
    if method == MODE_ADVAD or method == MODE_ADVADX:
        res = run_attack(classifier, img, label, cfg, image_index=idx)
    elif method == "pgd":
        res = pgd_attack(classifier, img, label, bl_cfg, image_index=idx)
    elif method == "pgd-decay":
        res = pgd_decay_attack(classifier, img, label, bl_cfg, schedule,
                               image_index=idx)
    else:
        raise UsageError(f"unknown mode {method!r}")
    res.metrics = measure(res.x_adv_quantized, img, res.success_quantized).to_json()
    res.metrics_raw = measure(res.x_adv_raw, img, res.success_raw).to_json()
    return idx, res, time.perf_counter() - t0


def _run_batch(method, classifier, samples, cfg, bl_cfg, schedule, jobs):
    results = [None] * len(samples)
    if jobs <= 1:
        for idx, (img, label) in enumerate(samples):
            results[idx] = _attack_one(method, classifier, img, label, idx,
                                       cfg, bl_cfg, schedule)
        return results
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_attack_one, method, classifier, img, label, idx,
                               cfg, bl_cfg, schedule)
                   for idx, (img, label) in enumerate(samples)]
        for fut in concurrent.futures.as_completed(futures):
            idx, res, dt = fut.result()
            results[idx] = (idx, res, dt)
    return results


def cmd_attack(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classifier = BuiltinCnn.load(args.model)
    dataset = _load_dataset(args)
    if dataset.num_classes != classifier.num_classes:
        raise UsageError(f"dataset has {dataset.num_classes} classes but the "
                         f"model expects {classifier.num_classes}")
    samples = _select_images(dataset, args.split, args.data_seed, args.limit)
    if not samples:
        raise UsageError("no images selected")

    xi = args.xi / 255.0
    method = args.mode
    cfg = bl_cfg = schedule = None
    if method in (MODE_ADVAD, MODE_ADVADX):
        cfg = AttackConfig(xi=xi, T=args.steps, mode=method,
                           gradient_chain=args.gradient_chain,
                           use_cam=args.use_cam, seed=args.seed,
                           precision=args.precision, trace=args.trace,
                           deep_trace=args.deep_trace,
                           beta_min=args.beta_min, beta_max=args.beta_max)
        cfg.validate()
        schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    else:
        if args.use_cam:
            raise UsageError("--use-cam applies to --mode advadx only")
        bl_cfg = BaselineConfig(xi=xi, steps=args.steps, step_size=args.pgd_step_size,
                                eta=args.eta, seed=args.seed,
                                random_start=not args.no_random_start)
        bl_cfg.validate()
        if method == "pgd-decay":
            schedule = make_schedule(args.steps, args.beta_min, args.beta_max)

    t0 = time.perf_counter()
    results = _run_batch(method, classifier, samples, cfg, bl_cfg, schedule,
                         args.jobs)
    total = time.perf_counter() - t0

    traces_dir = out / "traces"
    rows, attacked_success, traces = [], [], []
    for idx, res, dt in results:
        counted = res.clean_correct or not args.skip_misclassified
        if counted:
            attacked_success.append(res.success_raw)
        row = {
            "index": idx, "label": res.y_gt,
            "clean_correct": bool(res.clean_correct), "attacked": bool(counted),
            "success_raw": bool(res.success_raw),
            "success_quantized": bool(res.success_quantized),
            "pred_raw": res.pred_raw, "pred_quantized": res.pred_quantized,
            "guided_steps": res.guided_steps,
            "metrics": res.metrics, "metrics_raw": res.metrics_raw,
            "wall_clock_s": dt,
        }
        rows.append(row)
        write_png(res.x_adv_quantized, out / f"adv_{idx:04d}.png")
        write_raw_float(res.x_adv_raw, out / f"raw_{idx:04d}.advf")
        if res.trace is not None:
            traces.append(res.trace)
            traces_dir.mkdir(exist_ok=True)
            write_step_records(res.trace, traces_dir / f"steps_{idx:04d}.jsonl")
            if res.trace.is_deep:
                save_deep_trace(res.trace, traces_dir / f"deep_{idx:04d}.advfs",
                                traces_dir / f"meta_{idx:04d}.json")

    aggregate = {
        "selected": len(rows),
        "attacked": len(attacked_success),
        "asr_raw": asr(attacked_success) if attacked_success else None,
        "asr_quantized": asr([r["success_quantized"] for r in rows if r["attacked"]])
                         if attacked_success else None,
        "mean_l2": float(np.mean([r["metrics"]["l2"] for r in rows])),
        "median_l2": float(np.median([r["metrics"]["l2"] for r in rows])),
        "mean_linf": float(np.mean([r["metrics"]["linf"] for r in rows])),
        "mean_psnr": float(np.mean([r["metrics"]["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["metrics"]["ssim"] for r in rows])),
        "mean_guided_steps": float(np.mean([r["guided_steps"] for r in rows])),
    }
    verification = None
    if traces:
        running = [tr.running for tr in traces if tr.running]
        verification = {
            "premise_holds_all": all(r["premise_holds"] for r in running),
            "max_premise_linf": max(r["premise_linf_max"] for r in running),
            "rho": running[0]["rho"],
            "max_xhat_bound_margin": max(r["xhat_bound_margin"] for r in running),
            "max_x0_bound_margin": max(r["x0_bound_margin"] for r in running),
            "max_prop1_residual": max(r["prop1_residual"] for r in running),
            "decay": {k: v for k, v in decay_stats(traces).items()
                      if not isinstance(v, list)},
        }

    report = {
        "command": "attack",
        "config": {
            "model": str(args.model), "dataset": args.dataset,
            "num_classes": dataset.num_classes, "per_class": args.per_class,
            "size": args.size, "data_seed": args.data_seed, "split": args.split,
            "limit": args.limit, "mode": method, "xi": xi,
            "xi_over_255": args.xi, "steps": args.steps, "seed": args.seed,
            "precision": args.precision, "gradient_chain": args.gradient_chain,
            "use_cam": args.use_cam, "trace": args.trace,
            "deep_trace": args.deep_trace,
            "skip_misclassified": args.skip_misclassified,
            "eta": args.eta, "pgd_step_size": args.pgd_step_size,
            "jobs": args.jobs,
        },
        "schedule": schedule.summary() if schedule is not None else None,
        "images": rows,
        "aggregate": aggregate,
        "verification": verification,
        "timing": {"total_s": total},
    }
    _write_json(report, out / "report.json")
    _write_json(manifest(Dataset(samples, dataset.num_classes,
                                 dataset.provenance)), out / "manifest.json")
    asr_str = "n/a" if aggregate["asr_raw"] is None else f"{aggregate['asr_raw']:.4f}"
    print(f"{method}: attacked {aggregate['attacked']}/{aggregate['selected']} "
          f"images, ASR(raw) {asr_str}")
    print(f"median l2 {aggregate['median_l2']:.4f}  mean PSNR "
          f"{aggregate['mean_psnr']:.2f} dB  mean SSIM {aggregate['mean_ssim']:.4f}")
    if verification is not None:
        print(f"projection premise held on every step: "
              f"{verification['premise_holds_all']}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify

def cmd_verify(args) -> int:
    from .engine import load_deep_trace
    trace_dir = Path(args.traces)
    metas = sorted(trace_dir.glob("meta_*.json"))
    if not metas:
        raise FileNotFoundError(f"no meta_*.json deep traces under {trace_dir}")
    images = []
    all_pass = True
    for meta_path in metas:
        stem = meta_path.stem.replace("meta_", "")
        blob_path = trace_dir / f"deep_{stem}.advfs"
        trace = load_deep_trace(blob_path, meta_path)
        sched = make_schedule(trace.schedule_summary["T"],
                              trace.schedule_summary["beta_min"],
                              trace.schedule_summary["beta_max"])
        rep = verify_trace(trace, sched)
        all_pass = all_pass and rep.passed
        images.append({"trace": stem, "passed": rep.passed,
                       "checks": rep.to_json()["checks"]})
        status = "pass" if rep.passed else "FAIL"
        worst = min(rep.checks, key=lambda c: c.margin)
        print(f"trace {stem}: {status}  (tightest: {worst.name}, "
              f"margin {worst.margin:.3e}{', ' + worst.detail if worst.detail else ''})")
    report = {"command": "verify", "traces": str(trace_dir),
              "passed": all_pass, "images": images}
    out_path = Path(args.report) if args.report else trace_dir / "verification.json"
    _write_json(report, out_path)
    print(f"aggregate: {'pass' if all_pass else 'FAIL'}  ({out_path})")
    return EXIT_OK if all_pass else EXIT_VERIFICATION


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args) -> int:
    from .engine import advad_attack, effect_of_t_sweep
    from .metrics import l2_dist, psnr as psnr_fn
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classifier = BuiltinCnn.load(args.model)
    dataset = _load_dataset(args)
    samples = _select_images(dataset, args.split, args.data_seed, args.limit)
    if not samples:
        raise UsageError("no images selected")
    t_list = [int(v) for v in args.t_list.split(",") if v]
    xi_list = [float(v) for v in args.xi_list.split(",") if v]
    if any(x <= 0 for x in xi_list):
        raise UsageError("xi values must be positive (units of 1/255)")

    sub = Dataset(samples, dataset.num_classes, dataset.provenance)
    base = AttackConfig(xi=args.xi / 255.0, seed=args.seed,
                        precision=args.precision)
    t0 = time.perf_counter()
    t_rows = effect_of_t_sweep(classifier, sub, t_list, base)

    xi_rows = []
    for xi_255 in xi_list:
        cfg = dataclasses.replace(base, xi=xi_255 / 255.0, T=args.sweep_steps)
        succ, l2s, psnrs = [], [], []
        for idx, (img, label) in enumerate(samples):
            res = advad_attack(classifier, img, label, cfg, image_index=idx)
            if not res.clean_correct:
                continue
            succ.append(res.success_raw)
            l2s.append(l2_dist(res.x_adv_quantized, img))
            psnrs.append(psnr_fn(res.x_adv_quantized, img))
        xi_rows.append({"xi_over_255": xi_255, "T": args.sweep_steps,
                        "attacked": len(succ),
                        "asr_raw": float(np.mean(succ)) if succ else 0.0,
                        "l2_median": float(np.median(l2s)) if l2s else 0.0,
                        "l2_mean": float(np.mean(l2s)) if l2s else 0.0,
                        "psnr_mean": float(np.mean(psnrs)) if psnrs else 0.0})
    total = time.perf_counter() - t0

    report = {"command": "bench",
              "config": {"model": str(args.model), "dataset": args.dataset,
                         "limit": args.limit, "seed": args.seed,
                         "xi_over_255": args.xi, "t_list": t_list,
                         "xi_list": xi_list, "sweep_steps": args.sweep_steps},
              "effect_of_T": t_rows, "xi_sweep": xi_rows,
              "timing": {"total_s": total}}
    _write_json(report, out / "bench.json")

    print(f"effect of T (xi={args.xi}/255):")
    print(f"  {'T':>6}  {'ASR':>6}  {'l2 med':>8}  {'PSNR':>7}")
    for r in t_rows:
        print(f"  {r['T']:>6}  {r['asr_raw']:>6.3f}  {r['l2_median']:>8.3f}  "
              f"{r['psnr_mean']:>7.2f}")
    print(f"xi sweep (T={args.sweep_steps}):")
    print(f"  {'xi/255':>6}  {'ASR':>6}  {'l2 med':>8}  {'PSNR':>7}")
    for r in xi_rows:
        print(f"  {r['xi_over_255']:>6.0f}  {r['asr_raw']:>6.3f}  "
              f"{r['l2_median']:>8.3f}  {r['psnr_mean']:>7.2f}")
    print(f"report: {out / 'bench.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare

def cmd_compare(args) -> int:
    from .engine import advad_attack
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classifier = BuiltinCnn.load(args.model)
    dataset = _load_dataset(args)
    samples = _select_images(dataset, args.split, args.data_seed, args.limit)
    if not samples:
        raise UsageError("no images selected (empty dataset?)")
    xi = args.xi / 255.0
    cfg = AttackConfig(xi=xi, T=args.steps, seed=args.seed,
                       precision=args.precision)
    bl = BaselineConfig(xi=xi, steps=args.pgd_steps, seed=args.seed)
    pairs = []
    t0 = time.perf_counter()
    for idx, (img, label) in enumerate(samples):
        ra = advad_attack(classifier, img, label, cfg, image_index=idx)
        rp = pgd_attack(classifier, img, label, bl, image_index=idx)
        if not ra.clean_correct:
            continue
        ma = measure(ra.x_adv_quantized, img, ra.success_quantized)
        mp = measure(rp.x_adv_quantized, img, rp.success_quantized)
        pairs.append({"index": idx, "label": label,
                      "advad": {"success_raw": bool(ra.success_raw),
                                **ma.to_json()},
                      "pgd": {"success_raw": bool(rp.success_raw),
                              **mp.to_json()},
                      "l2_ratio": ma.l2 / mp.l2 if mp.l2 > 0 else None})
    total = time.perf_counter() - t0
    if not pairs:
        raise UsageError("no correctly-classified images to compare on")
    ratios = [p["l2_ratio"] for p in pairs if p["l2_ratio"] is not None]
    summary = {
        "pairs": len(pairs),
        "asr_advad": asr([p["advad"]["success_raw"] for p in pairs]),
        "asr_pgd": asr([p["pgd"]["success_raw"] for p in pairs]),
        "median_l2_advad": float(np.median([p["advad"]["l2"] for p in pairs])),
        "median_l2_pgd": float(np.median([p["pgd"]["l2"] for p in pairs])),
        "median_l2_ratio": float(np.median(ratios)) if ratios else None,
    }
    report = {"command": "compare",
              "config": {"model": str(args.model), "dataset": args.dataset,
                         "xi_over_255": args.xi, "steps": args.steps,
                         "pgd_steps": args.pgd_steps, "seed": args.seed,
                         "limit": args.limit},
              "pairs": pairs, "summary": summary,
              "timing": {"total_s": total}}
    _write_json(report, out / "compare.json")
    print(f"paired on {summary['pairs']} images (identical seeds)")
    print(f"  ASR: advad {summary['asr_advad']:.3f}  pgd {summary['asr_pgd']:.3f}")
    print(f"  median l2: advad {summary['median_l2_advad']:.3f}  "
          f"pgd {summary['median_l2_pgd']:.3f}  "
          f"ratio {summary['median_l2_ratio']:.3f}")
    print(f"report: {out / 'compare.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advad",
        description="Imperceptible adversarial attacks as a non-parametric "
                    "diffusion process")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the built-in CNN")
    _dataset_flags(p)
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run an attack over a dataset")
    _dataset_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=MODE_ADVAD,
                   choices=[MODE_ADVAD, MODE_ADVADX, *BASELINE_MODES])
    p.add_argument("--xi", type=float, default=8.0,
                   help="l-inf budget in units of 1/255 (default 8)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--deep-trace", action="store_true")
    p.add_argument("--use-cam", action="store_true")
    p.add_argument("--gradient-chain", choices=["full", "x0_only"], default="full")
    p.add_argument("--skip-misclassified", dest="skip_misclassified",
                   action="store_true", default=True)
    p.add_argument("--no-skip-misclassified", dest="skip_misclassified",
                   action="store_false")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--eta", type=float, default=1e-4,
                   help="pgd-decay initial step factor (unit range)")
    p.add_argument("--pgd-step-size", type=float, default=None,
                   help="pgd step in byte units (default 255*xi/10)")
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="replay deep traces through the verifiers")
    p.add_argument("--traces", required=True, help="directory of deep traces")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="effect-of-T and budget sweeps")
    _dataset_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xi", type=float, default=8.0)
    p.add_argument("--t-list", default="10,100,1000")
    p.add_argument("--xi-list", default="1,2,4,8")
    p.add_argument("--sweep-steps", type=int, default=200,
                   help="T used for the xi sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="paired diffusion-attack vs PGD report")
    _dataset_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xi", type=float, default=8.0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--pgd-steps", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
