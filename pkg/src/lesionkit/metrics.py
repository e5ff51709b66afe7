"""Overlap and similarity metrics plus report emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .blobgeom import signed_distance
from .field import VectorField
from .volume import LabelVolume, Mask, ScalarVolume, VolumeError

METRIC_NAMES = (
    "dice_segmentation",
    "dice_core_mask",
    "nmse_lesioned",
    "nmse_healthy_estimate",
    "dice_baseline",
    "dice_proposed",
    "field_nmse_baseline",
    "field_nmse_proposed",
    "ssim_healthy_estimate",
)


def _check_geom(a, b) -> None:
    if a.geometry.dims != b.geometry.dims:
        raise VolumeError(f"geometry mismatch: {a.geometry.dims} vs {b.geometry.dims}")


def _as_binary(x, label: int | None) -> np.ndarray:
    if isinstance(x, Mask):
        return x.data
    if isinstance(x, LabelVolume):
        if label is None:
            raise VolumeError("dice on label volumes requires a label")
        return x.data == label
    raise VolumeError(f"dice expects Mask or LabelVolume, got {type(x).__name__}")


def dice(a, b, label: int | None = None, where: np.ndarray | None = None) -> float:
    """2|A&B| / (|A|+|B|); both-empty pairs score 1.0.

    ``where`` optionally restricts the comparison to a boolean region.
    """
    _check_geom(a, b)
    am = _as_binary(a, label)
    bm = _as_binary(b, label)
    if where is not None:
        am = am & where
        bm = bm & where
    sa = int(am.sum())
    sb = int(bm.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / (sa + sb)


def perilesional_region(lesion_mask: Mask, dist: float = 10.0) -> np.ndarray:
    """Voxels within Euclidean distance ``dist`` of the lesion, lesion included."""
    if lesion_mask.is_empty():
        raise VolumeError("peri-lesional region of an empty lesion mask")
    if dist <= 0:
        raise VolumeError(f"dist must be > 0, got {dist}")
    return signed_distance(lesion_mask).data <= dist


def dice_perilesional(a, b, lesion_mask: Mask, dist: float = 10.0,
                      label: int | None = None) -> float:
    """Dice restricted to the peri-lesional region of ``lesion_mask``."""
    return dice(a, b, label=label, where=perilesional_region(lesion_mask, dist))


def nmse(x: ScalarVolume, ref: ScalarVolume) -> float:
    """Squared error normalized by reference energy: ||x - ref||^2 / ||ref||^2."""
    _check_geom(x, ref)
    denom = float((ref.data**2).sum())
    if denom == 0:
        raise VolumeError("nmse reference is all-zero")
    return float(((x.data - ref.data) ** 2).sum()) / denom


def field_nmse(f: VectorField, ref: VectorField) -> float:
    """Componentwise NMSE between vector fields of the same kind."""
    _check_geom(f, ref)
    if f.kind is not ref.kind:
        raise VolumeError(f"field kind mismatch: {f.kind} vs {ref.kind}")
    denom = float((ref.data**2).sum())
    if denom == 0:
        raise VolumeError("field_nmse reference is all-zero")
    return float(((f.data - ref.data) ** 2).sum()) / denom


def ssim3d(
    x: ScalarVolume,
    ref: ScalarVolume,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Mean SSIM over all fully-inside cubic windows (uniform weighting)."""
    _check_geom(x, ref)
    if window < 3 or window % 2 == 0:
        raise VolumeError(f"window must be odd and >= 3, got {window}")
    if any(window > d for d in x.geometry.dims):
        raise VolumeError(f"window {window} larger than volume dims {x.geometry.dims}")
    if data_range <= 0:
        raise VolumeError(f"data_range must be > 0, got {data_range}")
    a = x.data
    b = ref.data
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    r = window // 2
    crop = (slice(r, -r),) * 3

    def boxmean(arr):
        return ndimage.uniform_filter(arr, size=window, mode="constant")[crop]

    mu_a = boxmean(a)
    mu_b = boxmean(b)
    var_a = boxmean(a * a) - mu_a * mu_a
    var_b = boxmean(b * b) - mu_b * mu_b
    cov = boxmean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    """Rows of (case, metric, scope, value) plus run provenance."""

    rows: list[tuple[str, str, str, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    tool_version: str = "lesionkit 0.1.0"
    seed: int | None = None

    def add(self, case: str, metric: str, scope: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise VolumeError(f"non-finite metric value for {case}/{metric}/{scope}")
        self.rows.append((str(case), str(metric), str(scope), value))

    def values(self, metric: str, scope: str | None = None) -> list[float]:
        return [
            v for c, m, s, v in self.rows
            if m == metric and (scope is None or s == scope)
        ]


def format_value(value: float) -> str:
    return format(float(value), ".12g")


def emit_report(report: EvalReport, path, fmt: str = "csv") -> None:
    """Write rows with stable column order; byte-deterministic for equal input."""
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case", "metric", "scope", "value"])
        for case, metric, scope, value in report.rows:
            writer.writerow([case, metric, scope, format_value(value)])
        path.write_text(buf.getvalue())
    elif fmt == "json":
        payload = {
            "tool_version": report.tool_version,
            "seed": report.seed,
            "config": report.config,
            "rows": [
                {"case": c, "metric": m, "scope": s, "value": v}
                for c, m, s, v in report.rows
            ],
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        raise VolumeError(f"unknown report format {fmt!r}")
