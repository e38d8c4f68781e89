"""Patch and prescription-map metrics, overlap-averaged map reconstruction, PGM rendering.

SMAPE uses ``2|p - y| / (|p| + |y|)``; MAPE skips zero targets and reports
how many were skipped. Overlapping patch predictions are combined with an
unweighted mean.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import NODATA, BandGrid, PrescriptionMap, ValidityMask

PATCH = 8


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    scope: str
    rmse: float
    mape: float
    smape: float
    n_items: int
    n_pixels: int
    excluded_zero_targets: int


def _metrics_from_pixels(pred: np.ndarray, label: np.ndarray, scope: str, n_items: int) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    label = np.asarray(label, dtype=np.float64).ravel()
    if pred.size == 0:
        raise EvaluationError("no valid pixels to score")
    err = pred - label
    rmse = float(np.sqrt(np.mean(err * err)))
    nz = label != 0
    mape = float(100.0 * np.mean(np.abs(err[nz]) / np.abs(label[nz]))) if nz.any() else 0.0
    den = np.abs(pred) + np.abs(label)
    pos = den > 0
    smape = float(100.0 * np.mean(2.0 * np.abs(err[pos]) / den[pos])) if pos.any() else 0.0
    return MetricReport(scope, rmse, mape, smape, n_items, int(pred.size), int((~nz).sum()))


def patch_metrics(predictions: np.ndarray, labels: np.ndarray, masks: np.ndarray) -> MetricReport:
    """Pixel-pooled metrics over every valid pixel of every patch (original units)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    masks = np.asarray(masks, dtype=bool)
    if not predictions.shape == labels.shape == masks.shape:
        raise EvaluationError(f"shape mismatch {predictions.shape} / {labels.shape} / {masks.shape}")
    n_items = predictions.shape[0] if predictions.ndim == 3 else 1
    return _metrics_from_pixels(predictions[masks], labels[masks], "patch", n_items)


@dataclass(frozen=True)
class Reconstruction:
    pmap: PrescriptionMap
    coverage: np.ndarray  # (H, W) int


def reconstruct_map(patch_predictions: Iterable, scene_dims: tuple[int, int], parcel_id: str = "",
                    phase: int = 2, mask: np.ndarray | None = None) -> Reconstruction:
    """Average stride-1 patch predictions back onto the scene grid.

    ``patch_predictions`` yields ``(origin, grid)`` with origin either
    ``(row, col)`` or ``(parcel_id, phase, row, col)``. Pixels no patch covers
    (or outside ``mask``) are invalid and carry the no-data sentinel.
    """
    h, w = scene_dims
    acc = np.zeros((h, w), dtype=np.float64)
    cov = np.zeros((h, w), dtype=np.int64)
    for origin, grid in patch_predictions:
        r, c = origin[-2:]
        grid = np.asarray(grid, dtype=np.float64)
        ph, pw = grid.shape
        if r < 0 or c < 0 or r + ph > h or c + pw > w:
            raise EvaluationError(f"patch at ({r}, {c}) of size {ph}x{pw} falls outside {h}x{w} scene")
        acc[r:r + ph, c:c + pw] += grid
        cov[r:r + ph, c:c + pw] += 1
    valid = cov > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    mean = np.divide(acc, cov, out=np.zeros_like(acc), where=cov > 0)
    values = np.where(valid, mean, NODATA).astype(np.float32)
    return Reconstruction(PrescriptionMap(BandGrid(values), ValidityMask(valid), parcel_id, phase), cov)


def reconstruct_from_arrays(origins: Sequence, grids: np.ndarray, scene_dims, parcel_id="", phase=2,
                            mask=None) -> Reconstruction:
    return reconstruct_map(zip(origins, grids), scene_dims, parcel_id, phase, mask)


def map_metrics(reconstructed, truth) -> MetricReport:
    """Metrics over the jointly valid pixels; several (reconstructed, truth) pairs are pooled."""
    if isinstance(reconstructed, PrescriptionMap):
        reconstructed, truth = [reconstructed], [truth]
    preds, labels = [], []
    for rec, tru in zip(reconstructed, truth):
        if rec.shape != tru.shape:
            raise EvaluationError(f"map size mismatch {rec.shape} vs {tru.shape}")
        if not np.array_equal(rec.mask.valid, tru.mask.valid):
            raise EvaluationError(f"mask mismatch between reconstruction and truth for {tru.parcel_id!r}")
        m = tru.mask.valid
        preds.append(rec.grid.values[m])
        labels.append(tru.grid.values[m])
    if not preds:
        raise EvaluationError("no maps to score")
    return _metrics_from_pixels(np.concatenate(preds), np.concatenate(labels), "map", len(preds))


# -- report output -------------------------------------------------------------

CSV_FIELDS = ["variant", "scope", "rmse", "mape", "smape", "n_items", "n_pixels", "excluded_zero_targets"]


def metrics_csv(rows: Sequence[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    buf.write("# smape = 100*mean(2|p-y|/(|p|+|y|)); mape skips y == 0; overlaps averaged unweighted\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for variant, r in rows:
        w.writerow([variant, r.scope, f"{r.rmse:.6f}", f"{r.mape:.6f}", f"{r.smape:.6f}", r.n_items,
                    r.n_pixels, r.excluded_zero_targets])
    return buf.getvalue()


def metrics_json(report: dict) -> str:
    def enc(o):
        if isinstance(o, MetricReport):
            return asdict(o)
        raise TypeError(type(o))

    return json.dumps(report, default=enc, indent=2, sort_keys=True)


def _to_u8(values: np.ndarray, valid: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    span = vmax - vmin if vmax > vmin else 1.0
    scaled = np.clip((values.astype(np.float64) - vmin) / span, 0.0, 1.0)
    out = np.rint(scaled * 255.0).astype(np.uint8)
    out[~valid] = 0
    return out


def write_pgm(path: Path, image: np.ndarray):
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise EvaluationError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def render_pair(actual: PrescriptionMap, predicted: PrescriptionMap, prefix: Path) -> tuple[Path, Path, tuple]:
    """Write ``<prefix>_actual.pgm`` and ``<prefix>_predicted.pgm`` on one shared linear scale."""
    vals = np.concatenate([actual.grid.values[actual.mask.valid], predicted.grid.values[predicted.mask.valid]])
    vmin, vmax = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    prefix = Path(prefix)
    a_path = prefix.with_name(prefix.name + "_actual.pgm")
    p_path = prefix.with_name(prefix.name + "_predicted.pgm")
    write_pgm(a_path, _to_u8(actual.grid.values, actual.mask.valid, vmin, vmax))
    write_pgm(p_path, _to_u8(predicted.grid.values, predicted.mask.valid, vmin, vmax))
    return a_path, p_path, (vmin, vmax)
