"""Ablations on trained models: single-MLP forwarding and the patch-grid sweep."""

import contextvars
import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.data import SamplePair, center_crop
from app.diffcore import no_grad
from app.errors import ShapeError
from app.generator import Generator, broadcast_cell
from app.metrics import evaluate, mse, paired_comparisons, to_unit
from app.schemas import EvaluationResult, PatchGridSpec, ProbeReport, SweepRow, SweepTable, TrainConfig
from app.training import train

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]


def _as_generator(model) -> Generator:
    return model.generator() if hasattr(model, "generator") and not isinstance(model, Generator) else model


def probe_single_mlp(model, source: np.ndarray, cell: Cell) -> np.ndarray:
    """Evaluate every pixel with the MLP of ``cell``.

    The weight grid is computed from the whole source as usual and the
    positional encoding stays global; only the per-pixel choice of MLP is
    replaced.  Returns (B, out, H, W).
    """
    generator = _as_generator(model)
    r, c = cell
    grid = generator.grid
    if not (0 <= r < grid.rows and 0 <= c < grid.cols):
        raise ShapeError("probe", f"cell ({r}, {c}) outside grid {grid.label}")
    with no_grad():
        weights = generator.weight_grid(source).data
        tiled = broadcast_cell(weights, r * grid.cols + c)
        return generator.render(tiled, source).data


def patch_variance(image: np.ndarray, grid: PatchGridSpec) -> np.ndarray:
    """(M, N) variance of each patch of a (C, H, W) or (H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    grid.check_divides(h, w)
    cells = image.reshape(c, grid.rows, h // grid.rows, grid.cols, w // grid.cols)
    return cells.transpose(1, 3, 0, 2, 4).reshape(grid.rows, grid.cols, -1).var(axis=-1)


def select_probe_cells(source: np.ndarray, grid: PatchGridSpec) -> Tuple[Cell, Cell]:
    """(foreground, background): the cells with maximal and minimal source variance.

    Ties go to the first cell in row-major order.
    """
    var = patch_variance(source, grid)
    fg = np.unravel_index(int(np.argmax(var)), var.shape)
    bg = np.unravel_index(int(np.argmin(var)), var.shape)
    return (int(fg[0]), int(fg[1])), (int(bg[0]), int(bg[1]))


def run_probe(
    model,
    pair: SamplePair,
    foreground: Optional[Cell] = None,
    background: Optional[Cell] = None,
) -> Tuple[ProbeReport, Dict[str, np.ndarray]]:
    """Full model against the foreground and background single-MLP probes.

    Returns the report and the three output images keyed ``full``,
    ``foreground`` and ``background``.
    """
    generator = _as_generator(model)
    h, w = generator.extent
    source = center_crop(pair.source, h, w)[None]
    target = center_crop(pair.target, h, w)
    if foreground is None or background is None:
        fg, bg = select_probe_cells(source[0], generator.grid)
        foreground = foreground or fg
        background = background or bg
    outputs = {
        "full": generator.translate(source)[0],
        "foreground": probe_single_mlp(generator, source, foreground)[0],
        "background": probe_single_mlp(generator, source, background)[0],
    }
    t = to_unit(target)
    errors = {k: mse(to_unit(v), t) for k, v in outputs.items()}
    variances = {k: float(np.var(to_unit(v))) for k, v in outputs.items()}
    report = ProbeReport(
        grid=generator.grid.label,
        foreground_cell=foreground,
        background_cell=background,
        full_mse=errors["full"],
        foreground_mse=errors["foreground"],
        background_mse=errors["background"],
        full_variance=variances["full"],
        foreground_variance=variances["foreground"],
        background_variance=variances["background"],
    )
    logger.info("probe on %s: full mse %.5f, foreground-cell mse %.5f, background-cell variance %.2e",
                pair.id, report.full_mse, report.foreground_mse, report.background_variance)
    return report, outputs


# grid sweep

def _train_and_score(
    cfg: TrainConfig,
    train_set: Sequence[SamplePair],
    test_set: Sequence[SamplePair],
    out_dir: Optional[Path],
) -> EvaluationResult:
    run_dir = out_dir / f"grid-{cfg.grid.label}" if out_dir is not None else None
    result = train(cfg, train_set, test_set, run_dir)
    return evaluate(result.generator, test_set, batch_size=cfg.batch_size)


def _sweep_row(label: str, result: EvaluationResult, p_values: Dict[str, float]) -> SweepRow:
    return SweepRow(grid=label, **result.report.table_row(),
                    p_mse=p_values.get("mse"), p_ssim=p_values.get("ssim"), p_psnr=p_values.get("psnr"))


def grid_sweep(
    base: TrainConfig,
    grids: Sequence[PatchGridSpec],
    train_set: Sequence[SamplePair],
    test_set: Sequence[SamplePair],
    workers: int = 1,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[SweepTable, Dict[str, EvaluationResult]]:
    """Train one model per grid with the same seed and budget and compare them.

    Rows keep the order of ``grids``; p-values are paired Wilcoxon tests of
    per-sample scores against the 1x1 row when one is present.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    configs = {}
    for grid in grids:
        cfg = TrainConfig.model_validate({**base.model_dump(), "grid": grid.model_dump()})
        configs[grid.label] = cfg

    results: Dict[str, EvaluationResult] = {}
    if workers > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # each run gets its own copy of the precision / grad contexts
            futures = {
                label: pool.submit(contextvars.copy_context().run, _train_and_score, cfg, train_set, test_set, out_dir)
                for label, cfg in configs.items()
            }
            results = {label: fut.result() for label, fut in futures.items()}
    else:
        for label, cfg in configs.items():
            logger.info("sweep: training grid %s", label)
            results[label] = _train_and_score(cfg, train_set, test_set, out_dir)

    reference = "1x1" if "1x1" in results and len(results) > 1 else None
    rows: List[SweepRow] = []
    for label in configs:
        p_values = {}
        if reference is not None and label != reference:
            tests = paired_comparisons(results[label].report.rows, results[reference].report.rows)
            p_values = {k: v.p_value for k, v in tests.items()}
        rows.append(_sweep_row(label, results[label], p_values))
    return SweepTable(rows=rows, reference=reference), results


def write_sweep(table: SweepTable, directory: Union[str, Path], stem: str = "sweep") -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(SweepRow.model_fields))
        writer.writeheader()
        for row in table.rows:
            writer.writerow(row.model_dump())
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(table.model_dump(), indent=2), encoding="utf-8")
    return {"csv": csv_path, "json": json_path}
