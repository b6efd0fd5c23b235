"""``di-retinex`` command line: train, enhance, eval, simulate, analyze, bench."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import retinex_stats as rs
from ..adjust import enhance, net_forward
from ..sensor_sim import SceneConfig, simulate_pairs
from ..trainer import ABLATIONS, CheckpointError, TrainingError, load_checkpoint, save_checkpoint, train_zero_shot
from .config import ConfigError, build_run_config, load_json
from .dataset import DatasetError, scan_paired, scan_unpaired
from .image_io import ImageFormatError, read_image, write_gray, write_image

log = logging.getLogger("di_retinex")

THREADS_ENV = "DI_RETINEX_THREADS"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
HIST_BINS = 64


class CLIError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise CLIError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CLIError(f"{THREADS_ENV} must be a positive integer, got {n}")
    return n


def run_batch(items: Sequence, fn: Callable, workers: int) -> list[tuple[object, object, Exception | None]]:
    """Apply ``fn`` to every item; results come back in input order."""

    def guarded(item):
        try:
            return item, fn(item), None
        except Exception as exc:  # reported per item, never aborts the batch
            return item, None, exc

    if workers == 1 or len(items) <= 1:
        return [guarded(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, items))


def _echo(command: str, effective: dict) -> None:
    print(json.dumps({"command": command, "config": effective}, sort_keys=True, default=str), file=sys.stderr)


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report_failures(results) -> int:
    failed = [(item, exc) for item, _, exc in results if exc is not None]
    for item, exc in failed:
        print(f"error: {item}: {exc}", file=sys.stderr)
    if failed:
        print(f"{len(failed)} of {len(results)} items failed", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


# --- train --------------------------------------------------------------------


def cmd_train(args) -> int:
    file_values = load_json(args.config) if args.config else {}
    cli = {"epochs": args.epochs, "small": True if args.small else None,
           "ablations": args.ablate or None}
    run = build_run_config(file_values, cli, paths={"data": args.data, "out": args.out, "config": args.config})
    _echo("train", run.to_dict())
    files = scan_unpaired(args.data)
    images = [read_image(p) for p in files]
    log.info("training on %d images", len(images))
    result = train_zero_shot(images, run.train,
                             progress=lambda s: print(s.line(), flush=True)
                             if s.epoch == 1 or s.epoch % 10 == 0 or s.epoch == run.train.epochs else None)
    last = result.history[-1]
    meta = {"train": run.train.to_dict(), "images": [p.name for p in files],
            "final": {"total": last.total, "rd": last.rd, "vs": last.vs}}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, result.params, result.enhancer, result.optimizer, meta)
    print(f"saved {args.out}", file=sys.stderr)
    return EXIT_OK


# --- enhance ------------------------------------------------------------------

# fixed heatmap scales so dumps from different images are comparable
A_LOG_RANGE = (math.log(math.tan(math.radians(0.2))), math.log(math.tan(math.radians(89.8))))


def _heat(name: str, m: np.ndarray) -> np.ndarray:
    if name == "a":
        lo, hi = A_LOG_RANGE
        return (np.log(np.maximum(m, 1e-300)) - lo) / (hi - lo)
    return (m + 1.0) / 2.0


def dump_coeffs(out_dir: Path, stem: str, image: np.ndarray, ckpt) -> list[str]:
    maps = net_forward(image, ckpt.params, ckpt.enhancer).numpy()
    written = []
    for name in ("b", "c", "a"):
        m = maps[name]
        if m.shape[:2] != image.shape[:2]:  # scalar ablations: expand for display
            m = np.broadcast_to(m, image.shape[:2] + (m.shape[2],))
        for ch in range(m.shape[2]):
            base = out_dir / f"{stem}_{name}_ch{ch}"
            np.savetxt(base.with_suffix(".csv"), m[..., ch], fmt="%.10g", delimiter=",")
            write_gray(base.with_suffix(".png"), _heat(name, m[..., ch]))
            written.append(base.name)
    scales = {"a": {"scale": "log", "range": list(A_LOG_RANGE)}, "b": {"scale": "linear", "range": [-1, 1]},
              "c": {"scale": "linear", "range": [-1, 1]}}
    _write_json(out_dir / f"{stem}_coeffs.json", {"maps": written, "heatmap": scales})
    return written


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return scan_unpaired(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file or directory")
    return [path]


def cmd_enhance(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _echo("enhance", {"ckpt": args.ckpt, "in": args.input, "out": args.out, "dump_coeffs": args.dump_coeffs,
                      "enhancer": ckpt.enhancer.to_dict(), "workers": worker_count()})
    files = _inputs(Path(args.input))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(path: Path):
        img = read_image(path)
        write_image(out_dir / f"{path.stem}.png", enhance(img, ckpt.params, ckpt.enhancer, clamp_output=True))
        if args.dump_coeffs:
            dump_coeffs(out_dir, path.stem, img, ckpt)
        return path.name

    results = run_batch(files, job, worker_count())
    for _, name, exc in results:
        if exc is None:
            print(f"wrote {out_dir / name}", file=sys.stderr)
    return _report_failures(results)


# --- eval ---------------------------------------------------------------------


def evaluate_pair(low: np.ndarray, high: np.ndarray, ckpt) -> dict:
    out = enhance(low, ckpt.params, ckpt.enhancer, clamp_output=True)
    mse, psnr = rs.metric_mse_psnr(out, high)
    in_mse, in_psnr = rs.metric_mse_psnr(low, high)
    return {"mse": mse, "psnr": psnr, "ssim": rs.metric_ssim(out, high),
            "input_mse": in_mse, "input_psnr": in_psnr, "input_ssim": rs.metric_ssim(low, high),
            "mean_intensity": float(out.mean())}


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _echo("eval", {"ckpt": args.ckpt, "data": args.data, "report": args.report,
                   "enhancer": ckpt.enhancer.to_dict(), "workers": worker_count()})
    pairs = scan_paired(args.data)
    results = run_batch(pairs, lambda p: evaluate_pair(read_image(p.low), read_image(p.high), ckpt), worker_count())
    per_image = [dict(name=p.name, **r) for p, r, exc in results if exc is None]
    keys = ("mse", "psnr", "ssim", "input_psnr", "input_ssim")
    aggregate = {k: float(np.mean([r[k] for r in per_image])) for k in keys} if per_image else {}
    aggregate["count"] = len(per_image)
    failures = [{"name": p.name, "error": str(exc)} for p, _, exc in results if exc is not None]
    _write_json(args.report, {"images": per_image, "aggregate": aggregate, "failures": failures})
    if per_image:
        print(f"PSNR {aggregate['psnr']:.3f} dB  SSIM {aggregate['ssim']:.4f}  over {len(per_image)} images",
              file=sys.stderr)
    return _report_failures(results)


# --- simulate -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = SceneConfig.from_json(args.scene_config) if args.scene_config else SceneConfig()
    seed = cfg.seed if args.seed is None else args.seed
    _echo("simulate", {"scene": cfg.to_dict(), "seed": seed, "pairs": args.pairs, "out": args.out})
    if args.pairs < 1:
        raise CLIError(f"--pairs must be positive, got {args.pairs}")
    out = Path(args.out)
    (out / "low").mkdir(parents=True, exist_ok=True)
    (out / "high").mkdir(parents=True, exist_ok=True)
    scenes = []
    for i, (scene, low, high) in enumerate(simulate_pairs(cfg, args.pairs, seed)):
        name = f"pair_{i:04d}.png"
        write_image(out / "low" / name, low.image)
        write_image(out / "high" / name, high.image)
        scenes.append({"name": name, "ratio": float(scene.ratio.flat[0]),
                       "low_mean": float(low.image.mean()), "high_mean": float(high.image.mean())})
    _write_json(out / "scenes.json", {"scene_config": cfg.to_dict(), "seed": seed, "pairs": scenes})
    print(f"wrote {args.pairs} pairs to {out}", file=sys.stderr)
    return EXIT_OK


# --- analyze ------------------------------------------------------------------


def analyze_pair(low: np.ndarray, high: np.ndarray, direction: str, defaults: SceneConfig) -> tuple[dict, rs.JointHistogram]:
    reg = rs.regress_pair(low, high, direction)
    x, y = (low, high) if direction == "forward" else (high, low)
    mask = rs.regression_mask(high)
    offset = (y - reg.pooled.slope * x)[mask]
    q = 1.0 / (2**defaults.bits - 1) if defaults.bits else 0.0
    pred = rs.beta_moments_predict(reg.pooled.slope, defaults.mu, q, direction=direction)
    hist = rs.joint_histogram(low, high, HIST_BINS)
    report = {"direction": direction, "regression": reg.to_dict(),
              "moments": {"predicted": pred.to_dict(),
                          "empirical": {"mean": float(offset.mean()), "var": float(offset.var())},
                          "assumed_camera": {"mu": defaults.mu, "bits": defaults.bits}},
              "saturated_pixels": int(hist.saturated.sum()), "total_pixels": int(hist.saturated.size)}
    return report, hist


def cmd_analyze(args) -> int:
    direction = "reverse" if args.reverse else "forward"
    _echo("analyze", {"low": args.low, "high": args.high, "report": args.report, "direction": direction,
                      "bins": HIST_BINS})
    low, high = read_image(args.low), read_image(args.high)
    report, hist = analyze_pair(low, high, direction, SceneConfig())
    hist_path = Path(args.report).with_suffix(".hist.csv")
    sat_path = Path(args.report).with_suffix(".hist_saturated.csv")
    hist_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(hist_path, hist.counts, fmt="%d", delimiter=",")
    np.savetxt(sat_path, hist.saturated_counts, fmt="%d", delimiter=",")
    report["histogram"] = {"counts_csv": hist_path.name, "saturated_csv": sat_path.name, "bins": HIST_BINS,
                           "rows": "low", "columns": "high"}
    _write_json(args.report, report)
    r = report["regression"]["pooled"]
    print(f"{direction}: slope {r['slope']:.4f}  intercept {r['intercept']:.4f}  R2 {r['r2']:.4f}", file=sys.stderr)
    return EXIT_OK


# --- bench --------------------------------------------------------------------


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _echo("bench", {"ckpt": args.ckpt, "in": args.input, "iters": args.iters, "enhancer": ckpt.enhancer.to_dict()})
    if args.iters < 1:
        raise CLIError(f"--iters must be positive, got {args.iters}")
    img = read_image(args.input)
    enhance(img, ckpt.params, ckpt.enhancer)  # warm-up (JIT, caches)
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        enhance(img, ckpt.params, ckpt.enhancer, clamp_output=True)
        times.append((time.perf_counter() - t0) * 1e3)
    t = np.array(times)
    print(json.dumps({"image": list(img.shape), "iters": args.iters, "mean_ms": float(t.mean()),
                      "median_ms": float(np.median(t)), "min_ms": float(t.min())}, sort_keys=True))
    return EXIT_OK


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="di-retinex", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="zero-shot training on a folder of low-light PNGs")
    t.add_argument("--data", required=True, help="folder of PNGs (or a paired root; low/ is used)")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--small", action="store_true", help="4-channel network, one b and c map shared by RGB")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), metavar="FLAG",
                   help=f"repeatable; one of {', '.join(sorted(ABLATIONS))}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance one PNG or a folder of PNGs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="input", required=True, help="PNG file or folder")
    e.add_argument("--out", required=True, help="output folder")
    e.add_argument("--dump-coeffs", action="store_true", help="also write b/c/a maps as CSV and heatmap PNGs")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="MSE/PSNR/SSIM against references on a paired folder")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True, help="root holding low/ and high/")
    v.add_argument("--report", required=True, help="JSON report path")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="write synthetic low/high pairs from the sensor model")
    s.add_argument("--scene-config", help="JSON scene config (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="joint histogram, linear fit and offset moments for one pair")
    a.add_argument("--low", required=True)
    a.add_argument("--high", required=True)
    a.add_argument("--report", required=True, help="JSON report path; histogram CSVs go next to it")
    a.add_argument("--reverse", action="store_true", help="fit I_low on I_high instead")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="wall-clock enhancement time per frame")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--in", dest="input", required=True)
    b.add_argument("--iters", type=int, default=10)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CLIError, ConfigError, DatasetError, ImageFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, (CLIError, ConfigError)) else EXIT_FAIL
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
