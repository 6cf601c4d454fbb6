"""Image quality metrics, the Wilcoxon signed-rank test and evaluation reports.

``mse``, ``psnr``, ``ssim`` and ``masked_mse`` take images already on the
[0, 1] scale with dynamic range 1.  :func:`compare` remaps model-space images
from [-1, 1] first and is what evaluation uses.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter

from app.data import SamplePair, center_crop
from app.errors import ChannelMismatchError, DegenerateComparisonError, ShapeError
from app.schemas import (
    EvaluationResult,
    MetricsReport,
    MetricsRow,
    MetricSummary,
    WilcoxonResult,
)

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_WILCOXON_MAX_N = 25
MIN_NONZERO_DIFFERENCES = 5

Translator = Callable[[np.ndarray], np.ndarray]


def to_unit(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(op, f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _same_shape("mse", a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return float(10.0 * np.log10(1.0 / value))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / mse) in dB; identical images give ``inf``."""
    return psnr_from_mse(mse(a, b))


def _ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    blur = dict(sigma=SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="reflect")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    ux, uy = gaussian_filter(a, **blur), gaussian_filter(b, **blur)
    uxx = gaussian_filter(a * a, **blur)
    uyy = gaussian_filter(b * b, **blur)
    uxy = gaussian_filter(a * b, **blur)
    vx, vy, vxy = uxx - ux * ux, uyy - uy * uy, uxy - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    # border pixels see a reflected window
    r = SSIM_RADIUS
    return float(s[r:-r, r:-r].mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1 0.01, K2 0.03, range 1.

    (H, W) or (C, H, W); channels are averaged.
    """
    a, b = _same_shape("ssim", a, b)
    window = 2 * SSIM_RADIUS + 1
    if a.ndim not in (2, 3) or a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeError("ssim", f"image {a.shape} is smaller than the {window}x{window} window")
    if a.ndim == 2:
        return _ssim_2d(a, b)
    return float(np.mean([_ssim_2d(x, y) for x, y in zip(a, b)]))


def masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> Optional[float]:
    """MSE over the pixels where ``mask`` is set; None for an empty mask."""
    a, b = _same_shape("masked_mse", a, b)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any():
        return None
    return float(np.mean((a[mask] - b[mask]) ** 2))


def compare(prediction: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Dict[str, Optional[float]]:
    """All metrics of a model-space pair, computed after remapping [-1, 1] -> [0, 1]."""
    p, t = to_unit(prediction), to_unit(target)
    return {
        "mse": mse(p, t),
        "ssim": ssim(p, t),
        "psnr": psnr(p, t),
        "masked_mse": masked_mse(p, t, mask) if mask is not None else None,
    }


# Wilcoxon signed-rank

def _exact_tails(doubled_ranks: np.ndarray, observed: int):
    """P(S <= observed), P(S >= observed) for S the sum of a random sign subset."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    return float(counts[:observed + 1].sum()), float(counts[observed:].sum())


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided paired test on ``x - y``.

    Zero differences are dropped, ties get average ranks.  Up to 25 non-zero
    differences the null distribution is enumerated exactly; beyond that the
    normal approximation with tie and continuity correction is used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("wilcoxon", f"paired samples must be 1-D of equal length, got {x.shape} and {y.shape}")
    d = x - y
    if not np.all(np.isfinite(d)):
        raise DegenerateComparisonError("differences must be finite")
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        raise DegenerateComparisonError("degenerate comparison: all differences are zero")
    if n < MIN_NONZERO_DIFFERENCES:
        raise DegenerateComparisonError(
            f"degenerate comparison: {n} non-zero differences, need at least {MIN_NONZERO_DIFFERENCES}")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        lower, upper = _exact_tails(doubled, int(round(2 * w_plus)))
        p = min(1.0, 2.0 * min(lower, upper))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        if var <= 0:
            raise DegenerateComparisonError("degenerate comparison: zero variance under the null")
        z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, 2.0 * float(stats.norm.sf(z)))
        method = "normal-approximation"
    return WilcoxonResult(statistic=w_plus, n=n, p_value=max(p, np.finfo(float).tiny), method=method)


# evaluation

def summarize(rows: Sequence[MetricsRow]) -> Dict[str, MetricSummary]:
    """Mean and sample std per metric; non-finite PSNR rows and missing masks are left out."""
    summary = {}
    for key in ("mse", "ssim", "psnr", "masked_mse"):
        values = np.array([getattr(r, key) for r in rows if getattr(r, key) is not None], dtype=np.float64)
        values = values[np.isfinite(values)]
        if values.size == 0:
            continue
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        summary[key] = MetricSummary(mean=float(values.mean()), std=std)
    return summary


def build_report(rows: List[MetricsRow], metadata: Optional[dict] = None) -> MetricsReport:
    meta = {
        "range": "[-1,1] remapped to [0,1], dynamic range 1",
        "ssim": {"window": 2 * SSIM_RADIUS + 1, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2},
        "psnr_infinite_rows": sum(1 for r in rows if math.isinf(r.psnr)),
    }
    meta.update(metadata or {})
    return MetricsReport(rows=rows, summary=summarize(rows), count=len(rows), metadata=meta)


def score_predictions(pairs: Sequence[SamplePair], predictions: Sequence[np.ndarray]) -> List[MetricsRow]:
    rows = []
    for pair, pred in zip(pairs, predictions):
        values = compare(pred, pair.target, pair.mask)
        rows.append(MetricsRow(id=pair.id, **values))
    return rows


def copy_source_predictions(pairs: Sequence[SamplePair]) -> Dict[str, np.ndarray]:
    """Baseline that predicts the reference source channel unchanged."""
    return {pair.id: pair.source[:1].copy() for pair in pairs}


def _fit_extent(pairs: Sequence[SamplePair], height: int, width: int) -> List[SamplePair]:
    fitted = []
    for pair in pairs:
        if pair.extent == (height, width):
            fitted.append(pair)
            continue
        mask = center_crop(pair.mask.astype(np.float32), height, width, fill=0.0) > 0.5 if pair.mask is not None else None
        fitted.append(SamplePair(
            id=pair.id,
            source=center_crop(pair.source, height, width),
            target=center_crop(pair.target, height, width),
            mask=mask,
        ))
    return fitted


def _translate_all(model, pairs: Sequence[SamplePair], batch_size: int) -> List[np.ndarray]:
    sources = np.stack([pair.source for pair in pairs])
    if hasattr(model, "translate"):
        out = model.translate(sources, batch_size=batch_size)
    else:
        out = np.concatenate([np.asarray(model(sources[i:i + batch_size]))
                              for i in range(0, len(sources), batch_size)])
    return list(out)


def paired_comparisons(model_rows: Sequence[MetricsRow], other_rows: Sequence[MetricsRow]) -> Dict[str, WilcoxonResult]:
    """Wilcoxon per metric over rows matched by id; degenerate metrics are skipped."""
    other = {r.id: r for r in other_rows}
    results = {}
    for key in ("mse", "ssim", "psnr", "masked_mse"):
        x, y = [], []
        for row in model_rows:
            ref = other.get(row.id)
            if ref is None:
                continue
            a, b = getattr(row, key), getattr(ref, key)
            if a is None or b is None or not (math.isfinite(a) and math.isfinite(b)):
                continue
            x.append(a)
            y.append(b)
        if not x:
            continue
        try:
            results[key] = wilcoxon_signed_rank(x, y)
        except DegenerateComparisonError as exc:
            logger.warning("skipping %s comparison: %s", key, exc)
    return results


def evaluate(
    model,
    pairs: Sequence[SamplePair],
    baseline: Optional[Mapping[str, np.ndarray]] = None,
    batch_size: int = 8,
) -> EvaluationResult:
    """Score ``model`` on ``pairs``.

    ``model`` is a Generator, a Checkpoint or any callable mapping a
    (B, m, H, W) batch to (B, 1, H, W).  Samples are centre-cropped to the
    generator's extent when it has one.  With ``baseline`` (predictions by
    sample id) the report of the baseline and a Wilcoxon test per metric are
    attached.
    """
    if not pairs:
        raise ShapeError("evaluate", "dataset is empty")
    if hasattr(model, "generator") and not hasattr(model, "translate"):
        model = model.generator()
    if hasattr(model, "in_channels") and model.in_channels != pairs[0].channels:
        raise ChannelMismatchError(
            f"model expects {model.in_channels} source channels, dataset has {pairs[0].channels}")
    if hasattr(model, "extent"):
        pairs = _fit_extent(pairs, *model.extent)
    predictions = _translate_all(model, pairs, batch_size)
    report = build_report(score_predictions(pairs, predictions))
    result = EvaluationResult(report=report)
    if baseline is not None:
        extent = pairs[0].extent
        base_preds = [center_crop(np.asarray(baseline[p.id]), *extent) for p in pairs]
        result.baseline = build_report(score_predictions(pairs, base_preds), {"model": "baseline"})
        result.comparisons = paired_comparisons(report.rows, result.baseline.rows)
    return result


def write_report(
    result: Union[EvaluationResult, MetricsReport],
    directory: Union[str, Path],
    stem: str = "metrics",
) -> Dict[str, Path]:
    """Per-sample CSV plus a JSON block with the scaled aggregates."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    report = result.report if isinstance(result, EvaluationResult) else result
    csv_path = directory / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MetricsRow.model_fields))
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row.model_dump())
    block = {
        "count": report.count,
        "table": report.table_row(),
        "summary": {k: v.model_dump() for k, v in report.summary.items()},
        "metadata": report.metadata,
    }
    if isinstance(result, EvaluationResult):
        block["comparisons"] = {k: v.model_dump() for k, v in result.comparisons.items()}
        if result.baseline is not None:
            block["baseline_table"] = result.baseline.table_row()
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(block, indent=2), encoding="utf-8")
    return {"csv": csv_path, "json": json_path}
