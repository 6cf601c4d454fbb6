"""Command line entry point: ``python -m app.cli <command>``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

import functools
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from app.config import LOG_LEVEL, RUNS_DIR, parse_config, write_resolved_config
from app.data import (
    MANIFEST_NAME,
    SamplePair,
    center_crop,
    export_png,
    load_dataset,
    prepare_raw_image,
    read_tensor,
    synth_dataset,
    write_dataset,
    write_tensor,
)
from app.diffcore import precision
from app.errors import ConfigError, DatasetError, LocalInrError
from app.gradsuite import gradient_suite
from app.metrics import copy_source_predictions, evaluate, write_report
from app.probes import grid_sweep, run_probe, write_sweep
from app.schemas import PatchGridSpec, RunConfig
from app.training import load_models, train

logger = logging.getLogger("app")
console = Console()

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SIGNIFICANT = 0.001


class LocalInrGroup(click.Group):
    """Maps failures inside subcommands onto the documented exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.Abort):
            raise
        except click.UsageError as exc:
            exc.exit_code = EXIT_INVALID
            raise
        except ConfigError as exc:
            logger.error("invalid configuration: %s", exc)
            ctx.exit(EXIT_INVALID)
        except LocalInrError as exc:
            logger.error("%s: %s", exc.error_type, exc)
            ctx.exit(EXIT_RUNTIME)
        except Exception:
            logger.exception("unexpected failure")
            ctx.exit(EXIT_RUNTIME)


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
    )


def run_options(fn):
    """--config, --seed, --out-dir, --deterministic and --precision."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="JSON run configuration")
    @click.option("--seed", type=int, default=None, help="Seed for data synthesis and training")
    @click.option("--out-dir", type=click.Path(file_okay=False), default=None,
                  help="Run directory (default: $LOCALINR_RUNS_DIR/<command>)")
    @click.option("--deterministic/--no-deterministic", default=None,
                  help="Single-threaded, seed-exact execution")
    @click.option("--precision", "precision_bits", type=click.Choice(["32", "64"]), default=None,
                  help="Floating-point precision of the run")
    @functools.wraps(fn)
    def wrapper(config_path, seed, out_dir, deterministic, precision_bits, **kwargs):
        common = {
            "config_path": config_path,
            "out_dir": out_dir,
            "overrides": {
                "train.seed": seed,
                "data.seed": seed,
                "deterministic": deterministic,
                "train.deterministic": deterministic,
                "precision": int(precision_bits) if precision_bits else None,
            },
        }
        return fn(common, **kwargs)

    return wrapper


def prepare_run(common: Dict[str, Any], command: str, overrides: Optional[Dict[str, Any]] = None) -> Tuple[RunConfig, Path]:
    merged = {**common["overrides"], **(overrides or {})}
    cfg = parse_config(common["config_path"], merged)
    run_dir = Path(common["out_dir"]) if common["out_dir"] else RUNS_DIR / command
    write_resolved_config(cfg, run_dir)
    logger.info("%s: run directory %s", command, run_dir)
    return cfg, run_dir


def parse_grid(value: Optional[str]) -> Optional[dict]:
    return PatchGridSpec.parse(value).model_dump() if value else None


def parse_cell(value: Optional[str]) -> Optional[Tuple[int, int]]:
    if not value:
        return None
    try:
        r, c = (int(part) for part in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected 'row,col', got '{value}'") from None
    return r, c


def load_pairs(data: str, split: str) -> List[SamplePair]:
    """A split directory holding a manifest, or a dataset root with train/ and test/."""
    path = Path(data)
    if path.is_file():
        return load_dataset(path)
    if (path / MANIFEST_NAME).is_file():
        return load_dataset(path / MANIFEST_NAME)
    if (path / split / MANIFEST_NAME).is_file():
        return load_dataset(path / split / MANIFEST_NAME)
    raise DatasetError(None, f"no {split} manifest under {path}")


def dataset_for(cfg: RunConfig, data: Optional[str], split: str) -> List[SamplePair]:
    if data:
        return load_pairs(data, split)
    pairs, _ = synth_dataset(cfg.data, split)
    return pairs


def _fmt(value: Optional[float], digits: int = 3) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def _stars(p: Optional[float]) -> str:
    return "*" if p is not None and p < SIGNIFICANT else ""


@click.group(cls=LocalInrGroup)
@click.option("--log-level", default=LOG_LEVEL, show_default=True, help="Logging level")
def cli(log_level: str):
    """Local implicit neural representations for paired image translation."""
    setup_logging(log_level)


@cli.command("gen-data")
@run_options
@click.option("--train-samples", type=int, default=None)
@click.option("--test-samples", type=int, default=None)
@click.option("--channels", type=int, default=None, help="Source channels m")
@click.option("--png", "png_count", type=int, default=4, show_default=True, help="PNG previews per split")
def gen_data(common, train_samples, test_samples, channels, png_count):
    """Synthesize the paired train/test sets."""
    cfg, run_dir = prepare_run(common, "gen-data", {
        "data.train_samples": train_samples,
        "data.test_samples": test_samples,
        "data.source_channels": channels,
        "train.in_channels": channels,
    })
    table = Table(title="Synthetic dataset")
    table.add_column("split")
    table.add_column("samples", justify="right")
    table.add_column("manifest")
    for split in ("train", "test"):
        pairs, _ = synth_dataset(cfg.data, split)
        split_dir = run_dir / split
        manifest = write_dataset(pairs, split_dir, split)
        for pair in pairs[:png_count]:
            export_png(pair.source[0], split_dir / f"{pair.id}_src.png")
            export_png(pair.target[0], split_dir / f"{pair.id}_tgt.png")
        table.add_row(split, str(len(pairs)), str(manifest))
    console.print(table)


@cli.command("train")
@run_options
@click.option("--data", type=click.Path(), default=None, help="Dataset root (default: synthesize)")
@click.option("--epochs", type=int, default=None)
@click.option("--grid", default=None, help="Patch grid, e.g. 8x8")
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--lambda-rec", type=float, default=None)
@click.option("--workers", type=int, default=None, help="Threads for batch assembly")
def train_cmd(common, data, epochs, grid, batch_size, lr, lambda_rec, workers):
    """Train one generator/discriminator pair."""
    cfg, run_dir = prepare_run(common, "train", {
        "train.epochs": epochs,
        "train.grid": parse_grid(grid),
        "train.batch_size": batch_size,
        "train.lr": lr,
        "train.lambda_rec": lambda_rec,
        "train.workers": workers,
    })
    with precision(cfg.precision):
        train_set = dataset_for(cfg, data, "train")
        test_set = dataset_for(cfg, data, "test")
        result = train(cfg.train, train_set, test_set, run_dir)
    last = result.history.records[-1]
    table = Table(title=f"Training, grid {cfg.train.grid.label}")
    for column in ("epochs", "d_loss", "g_loss", "rec_loss", "val_mse", "val_ssim", "val_psnr"):
        table.add_column(column, justify="right")
    table.add_row(str(len(result.history.records)), _fmt(last.d_loss, 4), _fmt(last.g_loss, 4),
                  _fmt(last.rec_loss, 4), _fmt(last.val_mse, 5), _fmt(last.val_ssim, 4), _fmt(last.val_psnr, 2))
    console.print(table)
    console.print(f"checkpoint: {result.checkpoint_path}")


@cli.command("translate")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(), default=None, help="Dataset root or split directory")
@click.option("--input", "input_path", type=click.Path(dir_okay=False), default=None,
              help="Single raw tensor file (C, H, W) or (H, W)")
@click.option("--raw", is_flag=True, help="Non-zero crop and normalize the input first")
def translate_cmd(common, checkpoint, data, input_path, raw):
    """Translate sources with a trained checkpoint."""
    if bool(data) == bool(input_path):
        raise click.UsageError("give exactly one of --data or --input")
    cfg, run_dir = prepare_run(common, "translate")
    out_dir = run_dir / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    with precision(cfg.precision):
        generator, _, _ = load_models(checkpoint)
        h, w = generator.extent
        if input_path:
            image = read_tensor(input_path)
            if raw:
                image = prepare_raw_image(image, h, w, generator.grid)
            else:
                image = center_crop(image if image.ndim == 3 else image[None], h, w)
            items = [(Path(input_path).stem, image)]
        else:
            items = [(pair.id, pair.source) for pair in load_pairs(data, "test")]
            if raw:
                items = [(i, prepare_raw_image(s, h, w, generator.grid)) for i, s in items]
            else:
                items = [(i, center_crop(s, h, w)) for i, s in items]
        for sample_id, source in items:
            pred = generator.translate(source[None])[0]
            write_tensor(out_dir / f"{sample_id}_pred.raw", pred[0])
            export_png(pred, out_dir / f"{sample_id}_pred.png")
    console.print(f"{len(items)} predictions written to {out_dir}")


def metrics_table(title: str, rows: List[Tuple[str, Dict[str, float], Dict[str, Optional[float]]]]) -> Table:
    table = Table(title=title)
    for column in ("model", "MSE (x1e-3)", "SSIM (x100)", "PSNR (dB)"):
        table.add_column(column, justify="right")
    for name, values, p in rows:
        table.add_row(
            name,
            f"{values['mse_e3_mean']:.2f} ± {values['mse_e3_std']:.2f}{_stars(p.get('mse'))}",
            f"{values['ssim_x100_mean']:.1f} ± {values['ssim_x100_std']:.1f}{_stars(p.get('ssim'))}",
            f"{values['psnr_mean']:.2f} ± {values['psnr_std']:.2f}{_stars(p.get('psnr'))}",
        )
    return table


@cli.command("evaluate")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(), default=None, help="Dataset root (default: synthesize)")
@click.option("--baseline/--no-baseline", default=True, show_default=True,
              help="Compare against the copy-source baseline")
def evaluate_cmd(common, checkpoint, data, baseline):
    """Score a checkpoint on the test split."""
    cfg, run_dir = prepare_run(common, "evaluate")
    with precision(cfg.precision):
        generator, _, _ = load_models(checkpoint)
        pairs = dataset_for(cfg, data, "test")
        result = evaluate(generator, pairs, copy_source_predictions(pairs) if baseline else None,
                          batch_size=cfg.train.batch_size)
    paths = write_report(result, run_dir)
    rows = [(generator.grid.label, result.report.table_row(), {})]
    if result.baseline is not None:
        rows.insert(0, ("copy-source", result.baseline.table_row(), {}))
        rows[-1] = (rows[-1][0], rows[-1][1], {k: v.p_value for k, v in result.comparisons.items()})
    console.print(metrics_table(f"Evaluation on {result.report.count} samples", rows))
    console.print(f"report: {paths['csv']}, {paths['json']}")


@cli.command("sweep")
@run_options
@click.option("--data", type=click.Path(), default=None, help="Dataset root (default: synthesize)")
@click.option("--grids", default=None, help="Comma-separated grids, e.g. 1x1,2x2,4x4,8x8")
@click.option("--epochs", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Concurrent training runs")
def sweep_cmd(common, data, grids, epochs, workers):
    """Train one model per patch grid and compare them against 1x1."""
    grid_list = [parse_grid(g.strip()) for g in grids.split(",")] if grids else None
    cfg, run_dir = prepare_run(common, "sweep", {
        "sweep.grids": grid_list,
        "sweep.workers": workers,
        "train.epochs": epochs,
    })
    parallel = 1 if cfg.deterministic else cfg.sweep.workers
    with precision(cfg.precision):
        train_set = dataset_for(cfg, data, "train")
        test_set = dataset_for(cfg, data, "test")
        table, _ = grid_sweep(cfg.train, cfg.sweep.grids, train_set, test_set, parallel, run_dir)
    paths = write_sweep(table, run_dir)
    console.print(metrics_table(
        "Patch-grid sweep" + (f" (* p < {SIGNIFICANT} vs {table.reference})" if table.reference else ""),
        [(row.grid, row.model_dump(), {"mse": row.p_mse, "ssim": row.p_ssim, "psnr": row.p_psnr})
         for row in table.rows],
    ))
    console.print(f"sweep table: {paths['csv']}, {paths['json']}")


@cli.command("probe")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(), default=None, help="Dataset root (default: synthesize)")
@click.option("--sample-index", type=int, default=None)
@click.option("--foreground", default=None, help="Foreground cell 'row,col' (default: max source variance)")
@click.option("--background", default=None, help="Background cell 'row,col' (default: min source variance)")
def probe_cmd(common, checkpoint, data, sample_index, foreground, background):
    """Forward a whole image through single patch MLPs."""
    cfg, run_dir = prepare_run(common, "probe", {"probe.sample_index": sample_index})
    with precision(cfg.precision):
        generator, _, _ = load_models(checkpoint)
        pairs = dataset_for(cfg, data, "test")
        index = cfg.probe.sample_index
        if index >= len(pairs):
            raise ConfigError("probe.sample_index", f"{index} outside the {len(pairs)} test samples")
        report, outputs = run_probe(generator, pairs[index], parse_cell(foreground), parse_cell(background))
    (run_dir / "probe.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    for name, image in outputs.items():
        write_tensor(run_dir / f"probe_{name}.raw", np.asarray(image)[0])
        export_png(image, run_dir / f"probe_{name}.png")
    table = Table(title=f"Single-MLP probe, grid {report.grid}")
    for column in ("output", "cell", "MSE (x1e-3)", "variance"):
        table.add_column(column, justify="right")
    table.add_row("full model", "-", f"{report.full_mse * 1e3:.3f}", f"{report.full_variance:.2e}")
    table.add_row("foreground MLP", str(report.foreground_cell), f"{report.foreground_mse * 1e3:.3f}",
                  f"{report.foreground_variance:.2e}")
    table.add_row("background MLP", str(report.background_cell), f"{report.background_mse * 1e3:.3f}",
                  f"{report.background_variance:.2e}")
    console.print(table)


@cli.command("grad-check")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--eps", type=float, default=1e-5, show_default=True)
@click.option("--threshold", type=float, default=1e-4, show_default=True)
@click.option("--max-entries", type=int, default=24, show_default=True, help="Entries sampled per parameter")
def grad_check_cmd(seed, eps, threshold, max_entries):
    """Central finite differences against reverse-mode gradients at 64-bit."""
    entries = gradient_suite(seed=seed, eps=eps, threshold=threshold, max_entries=max_entries)
    table = Table(title="Gradient check")
    for column in ("target", "parameter", "entries", "max rel. error", "ok"):
        table.add_column(column)
    for entry in entries:
        table.add_row(entry.target, entry.parameter, str(entry.checked_entries),
                      f"{entry.max_relative_error:.2e}", "yes" if entry.passed else "[red]NO[/red]")
    console.print(table)
    failed = [e for e in entries if not e.passed]
    if failed:
        logger.error("%d of %d gradient checks above %.0e", len(failed), len(entries), threshold)
        raise click.exceptions.Exit(EXIT_RUNTIME)


@cli.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Model served by /translate (default: $LOCALINR_CHECKPOINT)")
def serve_cmd(host, port, checkpoint):
    """Run the HTTP service."""
    import uvicorn

    if checkpoint:
        os.environ["LOCALINR_CHECKPOINT"] = str(checkpoint)
    uvicorn.run("app.main:app", host=host, port=port)


if __name__ == "__main__":
    cli()
