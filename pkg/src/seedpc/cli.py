"""Command-line surface: compress, decompress, eval, train-denoiser, bench.

Every subcommand is deterministic for a fixed ``--seed`` and emits a JSON
(or CSV) report suitable for scripting.  Exit codes: 0 success, 2 argument
or input parsing problems, 3 undecodable streams, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec, metrics, toydenoiser
from .diffusion import (
    OracleDenoiser,
    SeedAnchorDenoiser,
    make_schedule,
    rounds_for,
    sample_patch,
)
from .errors import (
    DecodeError,
    DegenerateWeights,
    EmptyIndex,
    EmptyPatch,
    InvalidArgument,
    InvalidCloud,
    InvalidLevel,
    NoOverlap,
    ParseError,
    TrainingDiverged,
    UnsupportedStream,
)
from .patching import MAX_LEVEL, POINTS_PER_ROUND, cell_indices, divide, select_level
from .pointset import ColoredPointCloud, denormalize, load_ply, normalize, save_ply
from .tuning import TuneConfig, tune

__all__ = ["RunConfig", "main"]


@dataclass(frozen=True)
class RunConfig:
    """Pipeline knobs shared by the compression-path subcommands."""

    subcommand: str
    input: Path
    output: Path
    level: int | None = None  # None: pick via select_level
    iterations: int = 1000
    lr: float = 5e-5
    loss: str = "cdm"
    timesteps: int = 8
    qbits: int = 12
    neighbors: int = 32
    radius: float = 0.004
    denoiser: str = "anchor"
    oracle_target: Path | None = None
    seed: int = 0
    jobs: int = 1


def _json_safe(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _emit(report: dict, path: Path | None) -> None:
    text = json.dumps({k: _json_safe(v) for k, v in report.items()}, indent=2)
    if path is not None:
        Path(path).write_text(text + "\n")
    print(text)


def _make_denoiser(name: str, sched, oracle_rows: np.ndarray | None):
    if name == "anchor":
        return SeedAnchorDenoiser(sched)
    if name == "oracle":
        if oracle_rows is None:
            raise InvalidArgument(
                "the oracle denoiser needs target rows; pass --oracle-target"
            )
        return OracleDenoiser(oracle_rows, sched)
    return toydenoiser.ToyDenoiser(toydenoiser.load_checkpoint(name))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_compress(cfg: RunConfig, report_path: Path | None = None) -> None:
    t0 = time.perf_counter()
    cloud = load_ply(cfg.input).cloud
    norm, scale = normalize(cloud)
    level = cfg.level if cfg.level is not None else select_level(len(norm))
    grid, patches = divide(norm, level)
    sched = make_schedule(cfg.timesteps, "cosine")
    oracle_rows = norm.as_rows() if cfg.denoiser == "oracle" else None
    denoiser = _make_denoiser(cfg.denoiser, sched, oracle_rows)

    result = tune(
        patches,
        grid,
        denoiser,
        TuneConfig(
            iterations=cfg.iterations,
            lr=cfg.lr,
            loss=cfg.loss,
            neighbors=cfg.neighbors,
            radius=cfg.radius,
            seed=cfg.seed,
            sched=sched,
        ),
    )
    qs = codec.quantize_seeds(result.seeds, cfg.qbits, 8)
    cell_ns = np.zeros(level**3, dtype=np.uint8)
    cell_ns[grid.occupied] = np.minimum(
        [rounds_for(int(c)) for c in grid.counts[grid.occupied]], 255
    )
    blob = codec.encode_stream(level, cell_ns, scale, qs, cfg.qbits, 8)
    Path(cfg.output).write_bytes(blob)
    _emit(
        {
            "input": str(cfg.input),
            "output": str(cfg.output),
            "points": len(cloud),
            "level": level,
            "seeds": int(result.seeds.shape[0]),
            "bpp": metrics.bpp(codec.measure_bits(blob), len(cloud)),
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "loss_history": [
                [int(i), int(p), int(t), float(l)] for i, p, t, l in result.log
            ],
        },
        report_path,
    )


def _sample_cells(dec, denoiser, sched, seed: int, jobs: int) -> np.ndarray:
    """One sampling round set per occupied cell, concatenated in cell order."""
    seeds = dec.seeds
    cells = cell_indices(seeds[:, :3], dec.level)
    active = np.flatnonzero(dec.cell_ns)
    tasks = []
    for cell in active:
        rows = seeds[cells == cell]
        if rows.shape[0] == 0:
            # Quantization can nudge a seed across a cell face; fall back to
            # conditioning on everything rather than failing the stream.
            rows = seeds
        tasks.append((rows, int(dec.cell_ns[cell]) * POINTS_PER_ROUND))
    children = np.random.default_rng(seed).spawn(len(tasks))

    def run(task_rng):
        (rows, n_points), rng = task_rng
        return sample_patch(denoiser, rows, n_points, sched, rng)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, zip(tasks, children)))
    else:
        parts = [run(pair) for pair in zip(tasks, children)]
    return np.concatenate(parts) if parts else np.empty((0, 6))


def cmd_decompress(cfg: RunConfig, report_path: Path | None = None) -> None:
    t0 = time.perf_counter()
    dec = codec.decode_stream(Path(cfg.input).read_bytes())
    sched = make_schedule(cfg.timesteps, "cosine")
    oracle_rows = None
    if cfg.denoiser == "oracle":
        if cfg.oracle_target is None:
            raise InvalidArgument("decompress with --denoiser oracle needs --oracle-target")
        target = load_ply(cfg.oracle_target).cloud
        pos = (target.positions - dec.scale.center) / dec.scale.radius
        oracle_rows = np.hstack([pos, target.colors])
    denoiser = _make_denoiser(cfg.denoiser, sched, oracle_rows)

    rows = _sample_cells(dec, denoiser, sched, cfg.seed, cfg.jobs)
    out = denormalize(ColoredPointCloud(rows[:, :3], rows[:, 3:]), dec.scale)
    save_ply(out, cfg.output)
    _emit(
        {
            "input": str(cfg.input),
            "output": str(cfg.output),
            "points": len(out),
            "level": dec.level,
            "wall_time_s": round(time.perf_counter() - t0, 3),
        },
        report_path,
    )


def cmd_eval(args) -> None:
    t0 = time.perf_counter()
    gt = load_ply(args.gt).cloud
    rec = load_ply(args.rec).cloud
    rate = None
    if args.stream is not None:
        rate = metrics.bpp(codec.measure_bits(Path(args.stream).read_bytes()), len(gt))
    report = {
        "file": str(args.rec),
        "bpp": rate,
        "d1": metrics.psnr_geometry(gt, rec, "d1", formula=args.psnr_formula),
        "d2": metrics.psnr_geometry(gt, rec, "d2", formula=args.psnr_formula),
        "d3": metrics.psnr_color(gt, rec),
        "cd": float(metrics.chamfer(gt.positions, rec.positions)),
        "psnr_formula": args.psnr_formula,
        "d2_normals": "gt",
        "runtime_ms": round(1000.0 * (time.perf_counter() - t0), 1),
    }
    _emit(report, args.report)


def cmd_train(args) -> None:
    config = toydenoiser.ToyTrainConfig(
        steps=args.steps,
        lr=args.lr,
        batch=args.batch,
        hidden=args.hidden,
        kinds=tuple(args.kinds.split(",")),
        seed=args.seed,
    )
    csv_path = args.csv if args.csv is not None else Path(args.out).with_suffix(".csv")
    params, history = toydenoiser.train(config, csv_path=csv_path)
    toydenoiser.save_checkpoint(params, args.out)
    _emit(
        {
            "checkpoint": str(args.out),
            "loss_csv": str(csv_path),
            "steps": len(history),
            "parameters": params.n_params,
            "final_loss": history[-1][1] if history else None,
        },
        None,
    )


def _bench_point(cloud_path: Path, level: int, iterations: int, args) -> dict:
    """Compress/decompress/eval one (file, level) pair; returns bpp and D1."""
    workdir = Path(args.out_dir)
    stem = cloud_path.stem
    stream = workdir / f"{stem}_l{level}_i{iterations}.spcz"
    recon = workdir / f"{stem}_l{level}_i{iterations}.ply"
    gt = load_ply(cloud_path).cloud
    norm, scale = normalize(gt)
    grid, patches = divide(norm, level)
    sched = make_schedule(args.timesteps, "cosine")
    result = tune(
        patches,
        grid,
        SeedAnchorDenoiser(sched),
        TuneConfig(
            iterations=iterations, lr=args.lr, loss=args.loss,
            neighbors=args.neighbors, radius=args.radius, seed=args.seed, sched=sched,
        ),
    )
    qs = codec.quantize_seeds(result.seeds, args.qbits, 8)
    cell_ns = np.zeros(level**3, dtype=np.uint8)
    cell_ns[grid.occupied] = np.minimum(
        [rounds_for(int(c)) for c in grid.counts[grid.occupied]], 255
    )
    blob = codec.encode_stream(level, cell_ns, scale, qs, args.qbits, 8)
    stream.write_bytes(blob)
    dec = codec.decode_stream(blob)
    rows = _sample_cells(dec, SeedAnchorDenoiser(sched), sched, args.seed, args.jobs)
    rec = denormalize(ColoredPointCloud(rows[:, :3], rows[:, 3:]), scale)
    save_ply(rec, recon)
    return {
        "bpp": metrics.bpp(codec.measure_bits(blob), len(gt)),
        "d1": metrics.psnr_geometry(gt, rec, "d1"),
    }


def cmd_bench(args) -> None:
    corpus = sorted(Path(args.corpus).glob("*.ply"))
    if not corpus:
        raise InvalidArgument(f"no .ply files under {args.corpus}")
    levels = [int(x) for x in args.levels.split(",")]
    if any(not 1 <= l <= MAX_LEVEL for l in levels):
        raise InvalidArgument(f"levels must be in [1, {MAX_LEVEL}]")
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    table = {}
    for path in corpus:
        rows = []
        for level in levels:
            tuned = _bench_point(path, level, args.iterations, args)
            untuned = _bench_point(path, level, 0, args)
            rows.append((level, tuned["bpp"], tuned["d1"], untuned["bpp"], untuned["d1"]))
        csv_path = Path(args.out_dir) / f"{path.stem}_rd.csv"
        with open(csv_path, "w") as fh:
            fh.write("level,bpp_tuned,d1_tuned,bpp_untuned,d1_untuned\n")
            for row in rows:
                fh.write(",".join(str(_json_safe(v)) for v in row) + "\n")
        try:
            tuned_curve = metrics.RdCurve(tuple(sorted((r[1], r[2]) for r in rows)))
            untuned_curve = metrics.RdCurve(tuple(sorted((r[3], r[4]) for r in rows)))
            table[path.stem] = metrics.bd_psnr(untuned_curve, tuned_curve)
        except (InvalidArgument, NoOverlap) as exc:
            table[path.stem] = f"n/a ({exc})"
    print("BD-PSNR (tuned vs un-tuned), dB:")
    for name, value in table.items():
        shown = f"{value:+.3f}" if isinstance(value, float) else value
        print(f"  {name}: {shown}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_pipeline_flags(p: argparse.ArgumentParser, compress: bool) -> None:
    p.add_argument("--timesteps", "-T", type=int, default=8, help="diffusion steps (default 8)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel sampling workers")
    p.add_argument(
        "--denoiser",
        default="anchor",
        help="'anchor', 'oracle', or a toy-denoiser checkpoint path",
    )
    p.add_argument("--report", type=Path, default=None, help="also write the JSON report here")
    if compress:
        p.add_argument("--level", type=int, default=None, help="grid level (default: auto)")
        p.add_argument("--iterations", type=int, default=1000)
        p.add_argument("--lr", type=float, default=5e-5)
        p.add_argument("--loss", choices=("cdm", "dm", "inver"), default="cdm")
        p.add_argument("--qbits", "-q", type=int, default=12, help="geometry bits (default 12)")
        p.add_argument("--neighbors", type=int, default=32, help="ball-query k (default 32)")
        p.add_argument(
            "--radius",
            type=float,
            default=0.004,
            help="ball-query radius in normalized units; raise it for sparse "
            "clouds or tuning sees no gradient (default 0.004)",
        )
    else:
        p.add_argument(
            "--oracle-target",
            type=Path,
            default=None,
            help="original PLY for the oracle denoiser",
        )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seedpc", description="Seed-based point cloud compression pipeline."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="PLY -> .spcz")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    _add_pipeline_flags(p, compress=True)

    p = sub.add_parser("decompress", help=".spcz -> PLY")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    _add_pipeline_flags(p, compress=False)

    p = sub.add_parser("eval", help="metrics between two PLY files")
    p.add_argument("gt", type=Path)
    p.add_argument("rec", type=Path)
    p.add_argument("--stream", type=Path, default=None, help=".spcz for the bpp column")
    p.add_argument("--psnr-formula", choices=("standard", "paper"), default="standard")
    p.add_argument("--report", type=Path, default=None)

    p = sub.add_parser("train-denoiser", help="train the toy denoiser")
    p.add_argument("out", type=Path, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--kinds", default="sphere,box,torus")
    p.add_argument("--csv", type=Path, default=None, help="loss log path (default: beside out)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="rate-distortion sweep over a corpus")
    p.add_argument("corpus", type=Path, help="directory of .ply files")
    p.add_argument("out_dir", type=Path, help="output directory for curves")
    p.add_argument("--levels", default="1,2,3,4")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--loss", choices=("cdm", "dm", "inver"), default="cdm")
    p.add_argument("--timesteps", "-T", type=int, default=8)
    p.add_argument("--qbits", "-q", type=int, default=12)
    p.add_argument("--neighbors", type=int, default=32)
    p.add_argument("--radius", type=float, default=0.004)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    return parser


def _run(args) -> None:
    if args.command == "compress":
        cfg = RunConfig(
            subcommand="compress",
            input=args.input,
            output=args.output,
            level=args.level,
            iterations=args.iterations,
            lr=args.lr,
            loss=args.loss,
            timesteps=args.timesteps,
            qbits=args.qbits,
            neighbors=args.neighbors,
            radius=args.radius,
            denoiser=args.denoiser,
            seed=args.seed,
            jobs=args.jobs,
        )
        cmd_compress(cfg, args.report)
    elif args.command == "decompress":
        cfg = RunConfig(
            subcommand="decompress",
            input=args.input,
            output=args.output,
            timesteps=args.timesteps,
            denoiser=args.denoiser,
            oracle_target=args.oracle_target,
            seed=args.seed,
            jobs=args.jobs,
        )
        cmd_decompress(cfg, args.report)
    elif args.command == "eval":
        cmd_eval(args)
    elif args.command == "train-denoiser":
        cmd_train(args)
    elif args.command == "bench":
        cmd_bench(args)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _run(args)
        return 0
    except (ParseError, InvalidArgument, InvalidCloud, InvalidLevel, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DecodeError, UnsupportedStream) as exc:
        offset = getattr(exc, "offset", None)
        at = f" (byte offset {offset})" if offset is not None else ""
        print(f"decode error: {exc}{at}", file=sys.stderr)
        return 3
    except (TrainingDiverged, DegenerateWeights, EmptyPatch, EmptyIndex, NoOverlap) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
