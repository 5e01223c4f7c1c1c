"""NME, failure rate, AUC and the cumulative error distribution."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .schema import DatasetSchema, Normalization


@dataclass
class MetricReport:
    per_face_nme: list[float]
    fr: float
    auc: float
    ced: list[tuple[float, float]]
    normalization: str
    threshold: float = 10.0
    mean_nme: float = float("nan")
    excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ced"] = [list(p) for p in self.ced]
        return d

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_ced(self, path: str | Path) -> None:
        lines = ["threshold,fraction"] + [f"{t!r},{f!r}" for t, f in self.ced]
        Path(path).write_text("\n".join(lines) + "\n")


def normalization_distance(gt: np.ndarray, normalization: Normalization, bbox: Sequence[float] | None = None) -> float:
    """Pixel length that NME is divided by for one face."""
    if normalization.kind == "pair":
        i, j = normalization.pair
        return float(np.linalg.norm(np.asarray(gt[i], float) - np.asarray(gt[j], float)))
    if bbox is None:
        raise ValueError("bbox normalization needs the ground-truth box")
    _, _, w, h = bbox
    return float(np.sqrt(w * h)) if w > 0 and h > 0 else 0.0


def nme(pred: np.ndarray, gt: np.ndarray, d: float) -> float:
    if not d > 0:
        raise ValueError(f"normalization distance must be positive, got {d}")
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    return float(100.0 * np.mean(np.linalg.norm(pred - gt, axis=-1)) / d)


def ced_fraction(nmes: Sequence[float], t: float) -> float:
    nmes = np.asarray(nmes, float)
    return float(np.count_nonzero(nmes <= t) / nmes.size)


def failure_rate(nmes: Sequence[float], threshold: float = 10.0) -> float:
    """Percentage of faces whose NME is strictly above ``threshold``."""
    if len(nmes) == 0:
        raise ValueError("failure_rate of an empty list")
    # written as a CED complement so that fr == 100 * (1 - ced(threshold)) holds bitwise
    return 100.0 * (1.0 - ced_fraction(nmes, threshold))


def auc(nmes: Sequence[float], threshold: float = 10.0) -> float:
    """Area under the step CED on [0, threshold], divided by threshold."""
    if len(nmes) == 0:
        raise ValueError("auc of an empty list")
    errs = np.sort(np.asarray(nmes, float))
    n = errs.size
    area = 0.0
    for k, e in enumerate(errs):
        if e >= threshold:
            break
        upper = errs[k + 1] if k + 1 < n and errs[k + 1] < threshold else threshold
        area += (k + 1) / n * (upper - max(e, 0.0))
    return float(area / threshold)


def ced_points(nmes: Sequence[float], threshold: float = 10.0) -> list[tuple[float, float]]:
    errs = np.asarray(nmes, float)
    steps = sorted({float(e) for e in errs if 0.0 < e < threshold})
    return [(t, ced_fraction(errs, t)) for t in [0.0, *steps, float(threshold)]]


def crop_to_pixels(points_norm: np.ndarray, transform: np.ndarray, image_size: int) -> np.ndarray:
    """Map normalized crop coordinates to original pixels with a 2x3 crop->original affine."""
    p = np.asarray(points_norm, float) * image_size
    return p @ transform[:, :2].T + transform[:, 2]


def evaluate(
    predictions: Sequence[np.ndarray],
    ground_truth: Sequence[np.ndarray],
    schema: DatasetSchema,
    bboxes: Sequence[Sequence[float]] | None = None,
    transforms: Sequence[np.ndarray] | None = None,
    image_size: int | None = None,
    normalization: Normalization | str | None = None,
    threshold: float = 10.0,
) -> MetricReport:
    """Score a set of faces.

    ``predictions`` are in original pixels, unless ``transforms`` (crop->original
    2x3 affines) are given, in which case they are normalized crop coordinates and
    are mapped back with ``image_size`` first. Faces whose normalization distance is
    not positive are excluded and listed in ``report.excluded``.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions for {len(ground_truth)} ground-truth faces")
    norm = Normalization.parse(normalization) if normalization is not None else schema.normalization
    if norm.kind == "bbox" and bboxes is None:
        raise ValueError("bbox normalization needs bboxes")
    nmes, excluded = [], []
    for k, (pred, gt) in enumerate(zip(predictions, ground_truth)):
        pred = np.asarray(pred, float)
        if transforms is not None:
            pred = crop_to_pixels(pred, transforms[k], image_size)
        d = normalization_distance(gt, norm, None if bboxes is None else bboxes[k])
        if d <= 0:
            excluded.append(k)
            continue
        nmes.append(nme(pred, gt, d))
    if excluded:
        warnings.warn(f"{len(excluded)} face(s) excluded for degenerate normalization: {excluded}")
    if not nmes:
        raise ValueError("no scorable faces")
    return MetricReport(
        per_face_nme=nmes,
        fr=failure_rate(nmes, threshold),
        auc=auc(nmes, threshold),
        ced=ced_points(nmes, threshold),
        normalization=str(norm),
        threshold=threshold,
        mean_nme=float(np.mean(nmes)),
        excluded=excluded,
    )
