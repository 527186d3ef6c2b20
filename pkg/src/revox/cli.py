"""Command-line runner: execute experiments, compare runs, render checkpoints.

Exit codes: 0 success, 2 malformed config / missing inputs, 3 training abort,
4 refusing to overwrite existing outputs without --overwrite.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .field import load_grid
from .geometry import load_cameras
from .metrics import read_metrics_csv, round_means
from .pipeline import TrainingAbort, run_experiment
from .render import (
    render_image,
    save_depth_png,
    save_float_sidecar,
    save_gray16_png,
    save_image_png,
)
from .uncertainty import load_uncertainty_field, render_uncertainty

SATURATION_GAIN_DB = 0.05

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_TRAIN_ABORT = 3
EXIT_NO_CLOBBER = 4


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _parse_overrides(items: list[str]) -> dict[str, str]:
    overrides = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_run(config_path: str, set_items: list[str], out: str | None, overwrite: bool) -> int:
    try:
        overrides = _parse_overrides(set_items)
        config = load_config(config_path, overrides)
    except FileNotFoundError:
        return _fail(EXIT_BAD_INPUT, f"cannot read config {config_path}")
    except ConfigError as exc:
        return _fail(EXIT_BAD_INPUT, f"malformed config ({exc.key}): {exc}")
    out_dir = Path(out) if out else Path(f"{Path(config_path).stem}_run")
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            return _fail(EXIT_NO_CLOBBER, f"{out_dir} exists; pass --overwrite to replace it")
        if not (out_dir / "manifest.txt").exists():
            return _fail(EXIT_NO_CLOBBER, f"{out_dir} does not look like a run directory")
        shutil.rmtree(out_dir)
    try:
        result = run_experiment(config, out_dir)
    except TrainingAbort as exc:
        return _fail(EXIT_TRAIN_ABORT, str(exc))
    means = round_means(result.rows)
    for r, (mp, ms) in means.items():
        print(f"round {r}: mean psnr {mp:.3f} dB, mean ssim {ms:.4f}")
    print(f"run directory: {out_dir}")
    return EXIT_OK


@dataclass
class ReportRow:
    run: str
    round_index: int
    psnr: float
    ssim: float
    delta_psnr: float | None  # vs the first run, same round
    delta_ssim: float | None
    saturated: bool


def build_report(run_dirs: list[str]) -> list[ReportRow]:
    """Per-round aggregates for each run, deltas against the first run, and a
    saturation flag where the round-over-round PSNR gain drops below 0.05 dB."""
    tables: list[tuple[str, dict[int, tuple[float, float]]]] = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "metrics.csv"
        if not path.exists():
            raise FileNotFoundError(f"{run_dir}: no metrics.csv")
        tables.append((str(run_dir), round_means(read_metrics_csv(path))))
    baseline = tables[0][1]
    rows = []
    for run_name, means in tables:
        prev_psnr = None
        for r in sorted(means):
            mp, ms = means[r]
            d_p = d_s = None
            if baseline is not means and r in baseline:
                d_p = mp - baseline[r][0]
                d_s = ms - baseline[r][1]
            saturated = prev_psnr is not None and (mp - prev_psnr) < SATURATION_GAIN_DB
            rows.append(ReportRow(run_name, r, mp, ms, d_p, d_s, saturated))
            prev_psnr = mp
    return rows


def format_report_text(rows: list[ReportRow]) -> str:
    header = ["run", "round", "psnr", "ssim", "d_psnr", "d_ssim", "saturated"]
    table = [header]
    for row in rows:
        table.append(
            [
                row.run,
                str(row.round_index),
                f"{row.psnr:.3f}",
                f"{row.ssim:.4f}",
                "-" if row.delta_psnr is None else f"{row.delta_psnr:+.3f}",
                "-" if row.delta_ssim is None else f"{row.delta_ssim:+.4f}",
                "yes" if row.saturated else "",
            ]
        )
    widths = [max(len(line[c]) for line in table) for c in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in table
    )


def write_report_csv(path, rows: list[ReportRow]) -> None:
    with open(path, "w") as fh:
        fh.write("run,round,psnr,ssim,delta_psnr,delta_ssim,saturated\n")
        for row in rows:
            d_p = "" if row.delta_psnr is None else f"{row.delta_psnr:.6f}"
            d_s = "" if row.delta_ssim is None else f"{row.delta_ssim:.6f}"
            fh.write(
                f"{row.run},{row.round_index},{row.psnr:.6f},{row.ssim:.6f},"
                f"{d_p},{d_s},{int(row.saturated)}\n"
            )


def cmd_report(run_dirs: list[str], out: str | None) -> int:
    try:
        rows = build_report(run_dirs)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    print(format_report_text(rows))
    if out:
        write_report_csv(out, rows)
    return EXIT_OK


def cmd_render(
    checkpoint: str,
    camera_file: str,
    out: str,
    n_samples: int,
    background: tuple[float, float, float],
    sigma_field_path: str | None,
    overwrite: bool,
) -> int:
    try:
        grid = load_grid(checkpoint)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, f"cannot read checkpoint {checkpoint}: {exc}")
    try:
        cameras = load_cameras(camera_file)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, f"cannot read cameras {camera_file}: {exc}")
    ufield = None
    if sigma_field_path:
        try:
            ufield = load_uncertainty_field(sigma_field_path)
        except (OSError, ValueError) as exc:
            return _fail(EXIT_BAD_INPUT, f"cannot read sigma field {sigma_field_path}: {exc}")
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        return _fail(EXIT_NO_CLOBBER, f"{out_dir} exists; pass --overwrite to replace contents")
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cameras):
        image, depth = render_image(grid, cam, n_samples, background)
        save_image_png(out_dir / f"color_{i:03d}.png", image)
        save_depth_png(out_dir / f"depth_{i:03d}.png", depth, cam.far)
        save_float_sidecar(out_dir / f"depth_{i:03d}.npy", depth)
        if ufield is not None:
            umap = render_uncertainty(grid, ufield, cam, n_samples)
            peak = float(umap.max())
            save_gray16_png(out_dir / f"uncertainty_{i:03d}.png", umap / peak if peak > 0 else umap)
            save_float_sidecar(out_dir / f"uncertainty_{i:03d}.npy", umap)
    print(f"rendered {len(cameras)} cameras into {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revox", description=__doc__)
    parser.add_argument("--version", action="version", version=f"revox {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment from a config file")
    p_run.add_argument("--config", required=True, help="path to a flat key=value config")
    p_run.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config entry (repeatable)",
    )
    p_run.add_argument("--out", help="run directory (default: <config stem>_run)")
    p_run.add_argument("--overwrite", action="store_true", help="replace an existing run dir")

    p_report = sub.add_parser("report", help="compare metrics across run directories")
    p_report.add_argument("runs", nargs="+", help="run directories containing metrics.csv")
    p_report.add_argument("--out", help="also write the comparison as CSV")

    p_render = sub.add_parser("render", help="render PNGs from a grid checkpoint")
    p_render.add_argument("checkpoint", help="grid checkpoint file")
    p_render.add_argument("cameras", help="camera table file")
    p_render.add_argument("--out", required=True, help="output directory")
    p_render.add_argument("--samples", type=int, default=96, help="samples per ray")
    p_render.add_argument(
        "--background", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("R", "G", "B")
    )
    p_render.add_argument("--sigma-field", help="uncertainty field file (.npz) for U maps")
    p_render.add_argument("--overwrite", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.set, args.out, args.overwrite)
    if args.command == "report":
        return cmd_report(args.runs, args.out)
    if args.command == "render":
        return cmd_render(
            args.checkpoint,
            args.cameras,
            args.out,
            args.samples,
            tuple(args.background),
            args.sigma_field,
            args.overwrite,
        )
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
