"""``ilt`` command-line entry point.

Every subcommand reads the same INI configuration (see ``ilt.config``),
applies ``--set section.key=value`` overrides and validates everything
before any computation starts.  Exit codes: 0 success, 2 config or input
error, 3 numerical divergence, 4 partial batch failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import multiprocessing
import resource
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import IMAGE_SUFFIXES, LAYOUT_SUFFIXES, RunConfig, load_config
from .errors import ConfigError, DivergenceError, ILTError
from .kernels import KernelSet, import_npz, save_kernel_set, synth_gaussian_kernels
from .litho import aerial_image, print_corners
from .metrics import evaluate, pvband
from .morph import cdr
from .objective import curvy_ilt, write_trace_csv
from .raster import BinaryImage, GrayImage, GridSpec, PolygonLayout, load_png, read_layout, rasterize, save_png

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4
BENCH_FIELDS = ["case", "mse", "pv", "epe", "msa", "msd", "seconds", "peak_rss_mb", "error"]

log = logging.getLogger("ilt")


# --------------------------------------------------------------------------
# Inputs and outputs
# --------------------------------------------------------------------------

def load_design(path: Path, cfg: RunConfig) -> tuple[BinaryImage, PolygonLayout | None]:
    """A layout file rasterized on the configured grid, or a binary PNG."""
    suffix = path.suffix.lower()
    if suffix in LAYOUT_SUFFIXES:
        layout = read_layout(path)
        return rasterize(layout, cfg.grid), layout
    if suffix in IMAGE_SUFFIXES:
        return load_png(path, cfg.grid.nm_per_px, binary=True), None
    raise ConfigError(f"{path}: unsupported input type {suffix!r}")


def _case_dir(cfg: RunConfig, path: Path) -> Path:
    out = cfg.output / path.stem
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _preview(data: np.ndarray, spec) -> GrayImage:
    return GrayImage(spec, np.clip(data, 0.0, 1.0))


def _load_target(cfg: RunConfig, required: bool):
    if cfg.target is None:
        if required:
            raise ConfigError("a target is required ([run] target or --target)")
        return None, None
    return load_design(cfg.target, cfg)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    target, layout = _load_target(cfg, required=False)
    for path in cfg.inputs:
        mask, _ = load_design(path, cfg)
        out = _case_dir(cfg, path)
        intensity, _ = aerial_image(mask.as_gray(), cfg.litho.corners.nominal.kernels,
                                    cfg.litho.corners.nominal.dose, with_tape=False)
        peak = float(intensity.data.max())
        save_png(intensity.with_data(intensity.data / peak if peak > 0 else intensity.data), out / "aerial.png")
        z_nom, z_outer, z_inner = print_corners(mask, cfg.litho)
        for name, img in (("nominal", z_nom), ("outer", z_outer), ("inner", z_inner)):
            save_png(img, out / f"resist_{name}.png")
        if target is not None:
            report = evaluate(mask, target, cfg.litho, cfg.epe, layout).as_row(path.stem)
        else:
            report = {"case": path.stem, "pv": pvband(z_outer, z_inner)}
        report["aerial_peak"] = peak  # aerial.png is scaled by this value
        _write_json(report, out / "metrics.json")
    return EXIT_OK


def cmd_retarget(cfg: RunConfig) -> int:
    k_cvx, k_ccv = cfg.opt.k_cvx, cfg.opt.k_ccv
    for path in cfg.inputs:
        design, _ = load_design(path, cfg)
        out = _case_dir(cfg, path)
        retarget = cdr(design, k_cvx, k_ccv)
        save_png(retarget, out / "retarget.png")
        save_png(BinaryImage(design.spec, retarget.data ^ design.data), out / "diff.png")
    return EXIT_OK


def _snapshot_writer(out: Path, retarget: BinaryImage, spec_s):
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    save_png(retarget, snaps / "design.png")

    def write(snap):
        for name, data in (("mask", snap.mask_c), ("nominal", snap.z_nom),
                           ("outer", snap.z_max), ("inner", snap.z_min)):
            save_png(_preview(data, spec_s), snaps / f"epoch_{snap.epoch:04d}_{name}.png")

    return write


def optimize_one(path: Path, cfg: RunConfig):
    """Run the optimizer on one clip and write its artifacts; returns the result."""
    design, layout = load_design(path, cfg)
    out = _case_dir(cfg, path)
    retarget = design if cfg.opt.skip_cdr else cdr(design, cfg.opt.k_cvx, cfg.opt.k_ccv)
    spec_s = GridSpec(design.shape[1] // cfg.opt.s, design.shape[0] // cfg.opt.s,
                      design.spec.nm_per_px * cfg.opt.s)
    writer = _snapshot_writer(out, retarget, spec_s)
    try:
        result = curvy_ilt(design, cfg.opt, cfg.litho, layout, cfg.epe,
                           on_snapshot=writer, snapshot_every=cfg.snapshot_every)
    except DivergenceError as exc:
        write_trace_csv(exc.trace, out / "trace.csv")
        raise
    save_png(result.final_mask, out / "mask.png")
    write_trace_csv(result.trace, out / "trace.csv")
    report = result.metrics.as_row(path.stem)
    report["initial_mse"] = result.initial_mse
    _write_json(report, out / "metrics.json")
    return result


def cmd_optimize(cfg: RunConfig) -> int:
    for path in cfg.inputs:
        result = optimize_one(path, cfg)
        log.info("%s: mse %g (raw design %g), %.2f s", path.stem, result.metrics.mse,
                 result.initial_mse, result.seconds.get("total", 0.0))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    target, layout = _load_target(cfg, required=True)
    for path in cfg.inputs:
        mask, _ = load_design(path, cfg)
        bundle = evaluate(mask, target, cfg.litho, cfg.epe, layout)
        _write_json(bundle.as_row(path.stem), _case_dir(cfg, path) / "metrics.json")
    return EXIT_OK


def _peak_rss_mb() -> float:
    # ru_maxrss is in KiB on Linux; an OS statistic, so approximate
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _bench_clip(args) -> dict:
    path, cfg = args
    start = time.perf_counter()
    row = {"case": path.stem}
    try:
        result = optimize_one(path, cfg)
        row.update(result.metrics.as_row(path.stem))
        row["error"] = ""
    except Exception as exc:  # recorded per clip; the batch carries on
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["seconds"] = time.perf_counter() - start
    row["peak_rss_mb"] = _peak_rss_mb()
    return row


def _csv_value(value):
    if value is None:
        return "inf"
    if isinstance(value, float):
        return repr(value)
    return value


def bench_average(rows: list[dict]) -> dict:
    """Arithmetic mean of the successful rows; ``None`` stands for infinity."""
    ok = [r for r in rows if not r.get("error")]
    avg = {"case": "average", "error": ""}
    for key in ("mse", "pv", "epe", "msa", "msd", "seconds", "peak_rss_mb"):
        values = [math.inf if r[key] is None else float(r[key]) for r in ok]
        mean = math.fsum(values) / len(values) if values else math.nan
        avg[key] = None if math.isinf(mean) else mean
    return avg


def cmd_bench(cfg: RunConfig) -> int:
    cfg.output.mkdir(parents=True, exist_ok=True)
    jobs = [(path, cfg) for path in cfg.inputs]
    # one fresh process per clip so the peak-RSS column is per clip
    ctx = multiprocessing.get_context("spawn")
    with ctx.Pool(processes=min(cfg.workers, len(jobs)), maxtasksperchild=1) as pool:
        rows = pool.map(_bench_clip, jobs, chunksize=1)
    rows.append(bench_average(rows))
    with open(cfg.output / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row[k]) if k in row else "" for k in BENCH_FIELDS})
    failed = [r["case"] for r in rows if r.get("error")]
    for row in rows:
        if row.get("error"):
            print(f"ilt: {row['case']}: {row['error']}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_kernel_gen(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "identity":
        ones = np.ones((args.freq_dim, args.freq_dim), dtype=np.complex128)
        ks = KernelSet(np.ones(1), ones, "nominal")
        save_kernel_set(ks, out / "nominal.iltk")
        save_kernel_set(KernelSet(np.ones(1), ones, "defocus"), out / "defocus.iltk")
        return EXIT_OK
    corners = synth_gaussian_kernels(args.freq_dim, args.sigma_freq, args.defocus_blur)
    save_kernel_set(corners.nominal.kernels, out / "nominal.iltk")
    save_kernel_set(corners.outer.kernels, out / "defocus.iltk")
    return EXIT_OK


def cmd_kernel_import(args) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise ConfigError(f"kernel archive not found: {src}")
    ks = import_npz(src, args.tag)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_kernel_set(ks, args.output)
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

RUN_COMMANDS = {
    "simulate": (cmd_simulate, "print mask images at every process corner"),
    "retarget": (cmd_retarget, "round design corners and write the changed pixels"),
    "optimize": (cmd_optimize, "optimize a mask for each input design"),
    "evaluate": (cmd_evaluate, "score mask images against a target"),
    "bench": (cmd_bench, "optimize and score a batch of clips into one CSV report"),
}


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("inputs", nargs="*", help="input files or globs (overrides [run] inputs)")
    p.add_argument("-c", "--config", help="INI configuration file")
    p.add_argument("-o", "--output", help="output directory (overrides [run] output)")
    p.add_argument("--target", help="target layout or image (simulate, evaluate)")
    p.add_argument("--workers", type=int, help="parallel clips for bench")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--skip-cdr", action="store_true", help="optimize against the raw design")
    p.add_argument("--skip-morph", action="store_true", help="no in-loop or final morphology")
    p.add_argument("--skip-inloop-morph", action="store_true", help="final cleanup only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilt", description="Curvilinear inverse lithography.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in RUN_COMMANDS.items():
        _run_options(sub.add_parser(name, help=help_text))

    gen = sub.add_parser("kernel-gen", help="write synthetic nominal/defocus kernel files")
    gen.add_argument("-o", "--output", required=True, help="output directory")
    gen.add_argument("--kind", choices=("gaussian", "identity"), default="gaussian")
    gen.add_argument("--freq-dim", type=int, default=35)
    gen.add_argument("--sigma-freq", type=float, default=8.0)
    gen.add_argument("--defocus-blur", type=float, default=1.25)

    imp = sub.add_parser("kernel-import", help="convert an .npz kernel archive to the ILTK format")
    imp.add_argument("input")
    imp.add_argument("-o", "--output", required=True, help="output .iltk path")
    imp.add_argument("--tag", choices=("nominal", "defocus"), default="nominal")
    return parser


def _overrides(args) -> list[str]:
    items = list(args.overrides)
    if args.inputs:
        items.append("run.inputs=" + " ".join(str(Path(p).absolute()) for p in args.inputs))
    if args.output:
        items.append(f"run.output={Path(args.output).absolute()}")
    if args.target:
        items.append(f"run.target={Path(args.target).absolute()}")
    if args.workers is not None:
        items.append(f"run.workers={args.workers}")
    for flag in ("skip_cdr", "skip_morph", "skip_inloop_morph"):
        if getattr(args, flag):
            items.append(f"opt.{flag}=true")
    return items


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "kernel-gen":
            return cmd_kernel_gen(args)
        if args.command == "kernel-import":
            return cmd_kernel_import(args)
        cfg = load_config(args.config, _overrides(args))
        return RUN_COMMANDS[args.command][0](cfg)
    except DivergenceError as exc:
        print(f"ilt: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ILTError, OSError) as exc:
        print(f"ilt: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
