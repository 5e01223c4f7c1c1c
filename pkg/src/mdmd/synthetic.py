"""Procedural faces with analytically exact landmarks.

Each face is drawn from a small parameter vector (head ellipse, eye disks, nose
triangle, mouth band) and every landmark is computed from the same parameters,
so ground truth is exact up to float rounding. Faces depend only on
``(seed, index)``; the 9- and 68-point templates read off one shared geometry.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import Record, write_manifest
from .schema import DatasetSchema, resolve_schema

SUPERSAMPLE = 4
CANVAS = 96


class UnsupportedSchema(ValueError):
    pass


@dataclass
class FaceParams:
    center: tuple[float, float]
    angle: float  # radians
    rx: float
    ry: float
    eye_dx: float
    eye_dy: float  # eyes sit at -eye_dy (above center)
    eye_r: float
    brow_gap: float
    brow_w: float
    brow_h: float
    nose_top: float
    nose_y: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_curve: float
    mouth_t: float
    background: tuple[int, int, int]
    skin: tuple[int, int, int]
    eye_color: tuple[int, int, int]
    brow_color: tuple[int, int, int]
    nose_color: tuple[int, int, int]
    mouth_color: tuple[int, int, int]

    def to_image(self, pts) -> np.ndarray:
        """Face-local (x right, y down) pixel offsets -> image coordinates."""
        pts = np.asarray(pts, float)
        c, s = np.cos(self.angle), np.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        return pts @ rot.T + np.asarray(self.center)

    def bbox(self) -> tuple[float, float, float, float]:
        c, s = np.cos(self.angle), np.sin(self.angle)
        hw = np.hypot(self.rx * c, self.ry * s)
        hh = np.hypot(self.rx * s, self.ry * c)
        return (self.center[0] - hw, self.center[1] - hh, 2 * hw, 2 * hh)

    def eye_centers(self) -> np.ndarray:
        return self.to_image([[-self.eye_dx, -self.eye_dy], [self.eye_dx, -self.eye_dy]])


def face_params(seed: int, index: int, canvas: int = CANVAS) -> FaceParams:
    rng = np.random.default_rng([int(seed), int(index)])
    u = rng.uniform
    ry = u(0.28, 0.36) * canvas
    rx = ry * u(0.75, 0.9)
    eye_r = ry * u(0.11, 0.15)

    def color(lo, hi):
        return tuple(int(v) for v in rng.integers(lo, hi, size=3))

    return FaceParams(
        center=(canvas / 2 + u(-0.08, 0.08) * canvas, canvas / 2 + u(-0.08, 0.08) * canvas),
        angle=np.deg2rad(u(-15, 15)),
        rx=rx,
        ry=ry,
        eye_dx=rx * u(0.36, 0.44),
        eye_dy=ry * u(0.18, 0.28),
        eye_r=eye_r,
        brow_gap=eye_r + ry * u(0.08, 0.14),
        brow_w=eye_r * u(1.2, 1.5),
        brow_h=ry * u(0.02, 0.06),
        nose_top=-ry * u(0.0, 0.1),
        nose_y=ry * u(0.2, 0.3),
        nose_w=ry * u(0.1, 0.14),
        mouth_y=ry * u(0.5, 0.58),
        mouth_w=rx * u(0.3, 0.42),
        mouth_curve=ry * u(-0.04, 0.1),
        mouth_t=ry * u(0.08, 0.14),
        background=color(0, 90),
        skin=color(150, 240),
        eye_color=color(0, 60),
        brow_color=color(60, 120),
        nose_color=color(100, 150),
        mouth_color=(int(rng.integers(170, 240)), int(rng.integers(20, 70)), int(rng.integers(20, 70))),
    )


# ---- local geometry ---------------------------------------------------------

def _eye(p: FaceParams, side: int, angles) -> np.ndarray:
    cx, cy = side * p.eye_dx, -p.eye_dy
    a = np.asarray(angles, float)
    return np.stack([cx + p.eye_r * np.cos(a), cy + p.eye_r * np.sin(a)], -1)


def _mouth(p: FaceParams, t, offset) -> np.ndarray:
    """Point on the mouth band: ``offset`` in [-1, 1] runs from upper to lower edge."""
    t = np.asarray(t, float)
    yc = p.mouth_y + p.mouth_curve * (1 - t**2)
    half = 0.5 * p.mouth_t * (1 - t**2)
    return np.stack([t * p.mouth_w, yc + offset * half], -1)


def _brow(p: FaceParams, side: int) -> np.ndarray:
    r = np.linspace(-1, 1, 5)
    x = side * p.eye_dx + r * p.brow_w
    y = -p.eye_dy - p.brow_gap - p.brow_h * (1 - r**2)
    return np.stack([x, y], -1)


def local_landmarks_68(p: FaceParams) -> np.ndarray:
    pi = np.pi
    phi = pi - np.arange(17) * pi / 16
    jaw = np.stack([p.rx * np.cos(phi), p.ry * np.sin(phi)], -1)
    brows = np.concatenate([_brow(p, -1), _brow(p, 1)])
    bridge = np.stack([np.zeros(4), np.linspace(p.nose_top, p.nose_y, 4)], -1)
    nostrils = np.stack([np.linspace(-p.nose_w, p.nose_w, 5), np.full(5, p.nose_y + 0.2 * p.nose_w)], -1)
    ring = np.array([pi, 4 * pi / 3, 5 * pi / 3, 0.0, pi / 3, 2 * pi / 3])
    eyes = np.concatenate([_eye(p, -1, ring), _eye(p, 1, ring)])
    outer = np.concatenate([
        _mouth(p, [-1.0], 0),
        _mouth(p, [-2 / 3, -1 / 3, 0, 1 / 3, 2 / 3], -1),
        _mouth(p, [1.0], 0),
        _mouth(p, [2 / 3, 1 / 3, 0, -1 / 3, -2 / 3], 1),
    ])
    inner = np.concatenate([
        _mouth(p, [-0.85], 0),
        _mouth(p, [-0.5, 0, 0.5], -1 / 3),
        _mouth(p, [0.85], 0),
        _mouth(p, [0.5, 0, -0.5], 1 / 3),
    ])
    return np.concatenate([jaw, brows, bridge, nostrils, eyes, outer, inner])


# 9-point definition as a subset of the 68-point one:
# eye corners, nose tip, mouth left / top / right / bottom
NINE_FROM_68 = (36, 39, 42, 45, 30, 48, 51, 54, 57)


def local_landmarks(p: FaceParams, n: int) -> np.ndarray:
    full = local_landmarks_68(p)
    if n == 68:
        return full
    if n == 9:
        return full[list(NINE_FROM_68)]
    raise UnsupportedSchema(f"no synthetic template for {n} landmarks (supported: 9, 68)")


def landmarks(p: FaceParams, n: int) -> np.ndarray:
    return p.to_image(local_landmarks(p, n))


# ---- rendering ----------------------------------------------------------------

def _polygon(draw: ImageDraw.ImageDraw, p: FaceParams, local, fill) -> None:
    pts = p.to_image(local) * SUPERSAMPLE - 0.5
    draw.polygon([tuple(q) for q in pts], fill=fill)


def _circle(cx, cy, r, k=64) -> np.ndarray:
    a = np.linspace(0, 2 * np.pi, k, endpoint=False)
    return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], -1)


def render(p: FaceParams, canvas: int = CANVAS, noise_seed=None) -> np.ndarray:
    big = Image.new("RGB", (canvas * SUPERSAMPLE,) * 2, p.background)
    draw = ImageDraw.Draw(big)
    a = np.linspace(0, 2 * np.pi, 128, endpoint=False)
    _polygon(draw, p, np.stack([p.rx * np.cos(a), p.ry * np.sin(a)], -1), p.skin)
    for side in (-1, 1):
        brow = _brow(p, side)
        band = np.concatenate([brow + [0, -0.04 * p.ry], brow[::-1] + [0, 0.04 * p.ry]])
        _polygon(draw, p, band, p.brow_color)
        _polygon(draw, p, _circle(side * p.eye_dx, -p.eye_dy, p.eye_r), p.eye_color)
    _polygon(draw, p, [[0, p.nose_top], [p.nose_w, p.nose_y], [-p.nose_w, p.nose_y]], p.nose_color)
    t = np.linspace(-1, 1, 33)
    _polygon(draw, p, np.concatenate([_mouth(p, t, -1), _mouth(p, t[::-1], 1)]), p.mouth_color)
    img = np.asarray(big.resize((canvas, canvas), Image.Resampling.BOX), dtype=np.float64)
    if noise_seed is not None:
        img = img + np.random.default_rng(noise_seed).normal(0, 4.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def gen_synthetic(schema: DatasetSchema | str, count: int, seed: int, out_dir: str | Path,
                  canvas: int = CANVAS) -> Path:
    """Write ``count`` faces plus ``manifest.jsonl`` into ``out_dir``; returns the manifest path."""
    if isinstance(schema, str):
        schema = resolve_schema(schema)
    if schema.landmark_count not in (9, 68):
        raise UnsupportedSchema(f"no synthetic template for schema {schema.name} (N={schema.landmark_count})")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(count):
        p = face_params(seed, k, canvas)
        rel = f"images/face_{k:04d}.png"
        Image.fromarray(render(p, canvas, noise_seed=(int(seed), k, 1))).save(out / rel, optimize=False)
        records.append(Record(rel, p.bbox(), landmarks(p, schema.landmark_count), f"{schema.name}-{seed}-{k:04d}"))
    return write_manifest(out / "manifest.jsonl", schema, records)
