"""Manifests, face cropping and keypoint-consistent augmentation.

Coordinates are continuous pixel coordinates: pixel ``i`` spans ``[i, i + 1)``
so its center sits at ``i + 0.5``. The model frame is the unit square of the
resized crop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .schema import DatasetSchema, resolve_schema

MANIFEST_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class Record:
    image: str
    bbox: tuple[float, float, float, float]
    landmarks: np.ndarray
    face_id: str

    def to_doc(self) -> dict:
        return {
            "image": self.image,
            "bbox": [float(v) for v in self.bbox],
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
            "id": self.face_id,
        }


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 uint8
    bbox: tuple[float, float, float, float]
    landmarks: np.ndarray  # N x 2 original pixels
    dataset_id: int
    face_id: str


@dataclass
class ModelInput:
    crop: np.ndarray  # S x S x 3 float, normalized to [-1, 1]
    landmarks_norm: np.ndarray  # N x 2, unit-square crop frame
    crop_transform: np.ndarray  # 2 x 3 affine, crop pixels -> original pixels
    dataset_id: int = 0
    face_id: str = ""
    bbox: tuple[float, float, float, float] | None = None
    landmarks: np.ndarray | None = None  # original pixels, kept for scoring

    @property
    def image_size(self) -> int:
        return self.crop.shape[0]

    def to_original(self, points_norm: np.ndarray) -> np.ndarray:
        p = np.asarray(points_norm, float) * self.image_size
        return p @ self.crop_transform[:, :2].T + self.crop_transform[:, 2]


class Dataset:
    """A manifest's records; images are decoded on access."""

    def __init__(self, schema: DatasetSchema, records: list[Record], root: Path, dataset_id: int = 0,
                 header: dict | None = None):
        self.schema = schema
        self.records = records
        self.root = Path(root)
        self.dataset_id = dataset_id
        self.header = header or {}

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, k: int) -> Sample:
        rec = self.records[k]
        with Image.open(self.root / rec.image) as im:
            image = np.asarray(im.convert("RGB"))
        return Sample(image, rec.bbox, rec.landmarks.copy(), self.dataset_id, rec.face_id)

    def __iter__(self) -> Iterator[Sample]:
        for k in range(len(self)):
            yield self[k]


def manifest_header(schema: DatasetSchema) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "schema": schema.name,
        "landmark_count": schema.landmark_count,
        "schema_fingerprint": schema.fingerprint(),
    }


def write_manifest(path: str | Path, schema: DatasetSchema, records: Sequence[Record]) -> Path:
    path = Path(path)
    lines = [json.dumps(manifest_header(schema), sort_keys=True)]
    lines += [json.dumps(r.to_doc()) for r in records]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dataset(manifest_path: str | Path, extra_schemas: Sequence[DatasetSchema] = (),
                 dataset_id: int = 0) -> Dataset:
    path = Path(manifest_path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    try:
        schema = resolve_schema(header["schema"], extra_schemas)
    except KeyError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if int(header.get("landmark_count", schema.landmark_count)) != schema.landmark_count:
        raise DataError(f"{path}: header declares {header['landmark_count']} landmarks, "
                        f"schema {schema.name} has {schema.landmark_count}")
    records = []
    for line in lines[1:]:
        doc = json.loads(line)
        face_id = str(doc.get("id", len(records)))
        lm = np.asarray(doc["landmarks"], dtype=float).reshape(-1, 2)
        if lm.shape[0] != schema.landmark_count:
            raise DataError(f"{path}: face {face_id!r} has {lm.shape[0]} landmarks, "
                            f"schema {schema.name} expects {schema.landmark_count}")
        if not (path.parent / doc["image"]).exists():
            raise DataError(f"{path}: face {face_id!r} image missing: {doc['image']}")
        bbox = tuple(float(v) for v in doc["bbox"])
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise DataError(f"{path}: face {face_id!r} has non-positive bbox size {bbox}")
        records.append(Record(doc["image"], bbox, lm, face_id))
    return Dataset(schema, records, path.parent, dataset_id, header)


def normalize_pixels(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, np.float32) / 255.0 - 0.5) / 0.5


def _warp(image: np.ndarray, out_to_src: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample: output pixel centers are mapped through ``out_to_src`` (2x3, pixel units)."""
    c = np.arange(size) + 0.5
    xx, yy = np.meshgrid(c, c)
    sx = out_to_src[0, 0] * xx + out_to_src[0, 1] * yy + out_to_src[0, 2] - 0.5
    sy = out_to_src[1, 0] * xx + out_to_src[1, 1] * yy + out_to_src[1, 2] - 0.5
    img = np.asarray(image, np.float64)
    out = np.stack(
        [ndimage.map_coordinates(img[..., ch], [sy, sx], order=1, mode="nearest") for ch in range(img.shape[2])],
        axis=-1,
    )
    return out


def crop_and_resize(sample: Sample, image_size: int, margin: float = 0.25) -> ModelInput:
    """Square crop around the bbox, padded by ``margin * max(w, h)`` on every side."""
    x, y, w, h = sample.bbox
    if w <= 0 or h <= 0:
        raise DataError(f"face {sample.face_id!r}: invalid bbox {sample.bbox}")
    ih, iw = sample.image.shape[:2]
    if x >= iw or y >= ih or x + w <= 0 or y + h <= 0:
        raise DataError(f"face {sample.face_id!r}: bbox {sample.bbox} lies outside the {iw}x{ih} image")
    side = max(w, h) * (1.0 + 2.0 * margin)
    x0, y0 = x + w / 2 - side / 2, y + h / 2 - side / 2
    s = side / image_size
    transform = np.array([[s, 0.0, x0], [0.0, s, y0]])
    crop = _warp(sample.image, transform, image_size)
    crop = ((crop / 255.0 - 0.5) / 0.5).astype(np.float32)
    lm_norm = (np.asarray(sample.landmarks, float) - [x0, y0]) / side
    return ModelInput(crop, lm_norm, transform, sample.dataset_id, sample.face_id,
                      tuple(sample.bbox), np.asarray(sample.landmarks, float))


@dataclass
class AugmentPolicy:
    rotation_prob: float = 0.0
    max_rotation: float = 30.0  # degrees
    scale_prob: float = 0.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    translate_prob: float = 0.0
    max_translate: float = 0.08  # fraction of crop side
    flip_prob: float = 0.0
    jitter_prob: float = 0.0
    brightness: float = 0.2
    contrast: float = 0.2

    @classmethod
    def default(cls) -> "AugmentPolicy":
        return cls(rotation_prob=0.5, scale_prob=0.5, translate_prob=0.5, flip_prob=0.5, jitter_prob=0.5)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AugmentPolicy":
        if not d:
            return cls()
        if d == "default":
            return cls.default()
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def _affine3(m: np.ndarray) -> np.ndarray:
    out = np.eye(3)
    out[:2] = m
    return out


def augmentation_matrix(size: int, angle_deg: float = 0.0, scale: float = 1.0,
                        shift: Sequence[float] = (0.0, 0.0), flip: bool = False) -> np.ndarray:
    """3x3 crop-pixel affine: optional mirror, then rotate/scale about the center, then shift."""
    c = size / 2.0
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) * scale
    m = np.eye(3)
    if flip:
        m = np.array([[-1.0, 0.0, size], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    geo = np.eye(3)
    geo[:2, :2] = rot
    geo[:2, 2] = np.array([c, c]) - rot @ [c, c] + np.asarray(shift, float) * size
    return geo @ m


def apply_affine(inp: ModelInput, matrix: np.ndarray, flip_permutation: Sequence[int] | None = None) -> ModelInput:
    """Warp pixels and landmarks by the same crop-pixel affine; permute indices if ``flip_permutation``."""
    size = inp.image_size
    inv = np.linalg.inv(matrix)
    crop = _warp(inp.crop, inv[:2], size).astype(inp.crop.dtype)
    pts = inp.landmarks_norm * size
    moved = (pts @ matrix[:2, :2].T + matrix[:2, 2]) / size
    if flip_permutation is not None:
        moved = moved[list(flip_permutation)]
    transform = (_affine3(inp.crop_transform) @ inv)[:2]
    return replace(inp, crop=crop, landmarks_norm=moved, crop_transform=transform)


def augment(inp: ModelInput, policy: AugmentPolicy, rng: np.random.Generator,
            flip_permutation: Sequence[int] | None = None) -> ModelInput:
    """Random geometric + photometric augmentation; fully determined by ``rng``'s state."""
    angle = scale = None
    shift = (0.0, 0.0)
    # one draw per knob, in a fixed order, so streams stay aligned across policies
    u = rng.random(5)
    if u[0] < policy.rotation_prob:
        angle = rng.uniform(-policy.max_rotation, policy.max_rotation)
    if u[1] < policy.scale_prob:
        scale = rng.uniform(*policy.scale_range)
    if u[2] < policy.translate_prob:
        shift = tuple(rng.uniform(-policy.max_translate, policy.max_translate, size=2))
    flip = u[3] < policy.flip_prob
    if flip and flip_permutation is None:
        raise DataError("horizontal flip requested but the schema has no flip_permutation")

    out = inp
    if angle is not None or scale is not None or shift != (0.0, 0.0) or flip:
        m = augmentation_matrix(inp.image_size, angle or 0.0, scale or 1.0, shift, flip)
        out = apply_affine(inp, m, flip_permutation if flip else None)
    if u[4] < policy.jitter_prob:
        b = rng.uniform(-policy.brightness, policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        mean = out.crop.mean()
        out = replace(out, crop=((out.crop - mean) * c + mean + b).astype(out.crop.dtype))
    return out


def prepare(dataset: Dataset, image_size: int, margin: float = 0.25) -> list[ModelInput]:
    return [crop_and_resize(s, image_size, margin) for s in dataset]
