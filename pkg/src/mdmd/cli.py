"""Command-line entry points.

Exit codes: 0 success, 2 missing input or bad config, 3 schema/checkpoint
mismatch, 4 unknown schema name. Errors go to stderr as one line,
``error: <reason>: <detail>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import checkpoint as ckpt
from .data import DataError, Sample, crop_and_resize, read_dataset
from .loss import decode_cholesky
from .model import default_dtype
from .schema import DatasetSchema, SchemaError, describe, make_schema, resolve_schema
from .synthetic import UnsupportedSchema, gen_synthetic
from .train import TrainConfig, Trainer, evaluate_inputs


@dataclass
class CommandOutcome:
    exit_code: int
    report_path: Path | None = None


class CliError(Exception):
    def __init__(self, code: int, reason: str, detail: str):
        super().__init__(detail)
        self.code, self.reason = code, reason


def _as_checkpoint_schema(schema: DatasetSchema, ckpt_schema: DatasetSchema, token_mode: str) -> DatasetSchema:
    """Rebuild a manifest schema the way training stored it (per-landmark runs regroup it)."""
    if token_mode != "per-landmark":
        return schema
    g = ckpt_schema.group_count
    groups = [[k] for k in range(schema.landmark_count)] + [[] for _ in range(g - schema.landmark_count)]
    return make_schema(schema.name, schema.landmark_count, groups, schema.normalization, schema.flip_permutation)


def _load_checkpoint(path):
    try:
        return ckpt.load_model(path, dtype=default_dtype())
    except FileNotFoundError as exc:
        raise CliError(2, "missing-file", str(exc)) from exc
    except ckpt.CheckpointError as exc:
        raise CliError(2, "bad-checkpoint", str(exc)) from exc


def _dataset_index(model, name: str) -> int:
    try:
        return model.schema_set.index(name)
    except KeyError as exc:
        raise CliError(3, "schema-mismatch", f"checkpoint was not trained on schema {name!r}") from exc


def cmd_train(config_path) -> CommandOutcome:
    path = Path(config_path)
    if not path.exists():
        raise CliError(2, "missing-file", f"config not found: {path}")
    try:
        config = TrainConfig.load(path)
    except (ValueError, TypeError) as exc:
        raise CliError(2, "config", str(exc)) from exc
    if "MDMD_PRECISION" in os.environ:
        config.precision = os.environ["MDMD_PRECISION"].lower()
        if config.precision not in ("single", "double"):
            raise CliError(2, "config", f"MDMD_PRECISION must be single or double, got {config.precision!r}")
    for m in config.datasets:
        if not Path(m).exists():
            raise CliError(2, "missing-file", f"manifest not found: {m}")
    try:
        trainer = Trainer(config)
    except DataError as exc:
        raise CliError(2, "data", str(exc)) from exc
    final = trainer.fit()
    print(final)
    return CommandOutcome(0, final)


def cmd_eval(checkpoint, manifest, ced_out=None, report_out=None, normalization=None) -> CommandOutcome:
    model, header, _ = _load_checkpoint(checkpoint)
    try:
        try:
            dataset = read_dataset(manifest)
        except DataError:
            # schemas that are not bundled can still be resolved from the checkpoint
            dataset = read_dataset(manifest, extra_schemas=model.schema_set.schemas)
    except FileNotFoundError as exc:
        raise CliError(2, "missing-file", str(exc)) from exc
    except DataError as exc:
        raise CliError(2, "data", str(exc)) from exc
    j = _dataset_index(model, dataset.schema.name)
    token_mode = (header.get("train_config") or {}).get("token_mode", "flsg")
    expected = model.schema_set[j]
    declared = dataset.header.get("schema_fingerprint", dataset.schema.fingerprint())
    if (declared != dataset.schema.fingerprint()
            or _as_checkpoint_schema(dataset.schema, expected, token_mode).fingerprint() != expected.fingerprint()):
        raise CliError(3, "fingerprint-mismatch",
                       f"manifest schema {dataset.schema.name} ({declared}) differs from the checkpoint's")
    inputs = [crop_and_resize(s, model.config.image_size) for s in dataset]
    report = evaluate_inputs(model, inputs, j, dataset.schema, normalization)
    report_path = Path(report_out) if report_out else Path(checkpoint).with_suffix(".eval.json")
    report.write(report_path)
    if ced_out:
        report.write_ced(ced_out)
    print(json.dumps({"report": str(report_path), "mean_nme": report.mean_nme, "fr": report.fr,
                      "auc": report.auc, "faces": len(report.per_face_nme)}))
    return CommandOutcome(0, report_path)


def pixel_covariance(cholesky_raw: torch.Tensor, crop_transform: np.ndarray, image_size: int) -> np.ndarray:
    """Crop-frame covariances (N, 2, 2) mapped to original pixels: J Σ Jᵀ."""
    sigma = decode_cholesky(cholesky_raw).covariance().detach().double().numpy()
    jac = crop_transform[:, :2] * image_size  # unit crop square -> original pixels
    return jac @ sigma @ jac.T


def predict_image(model, image: np.ndarray, bbox, dataset_id: int) -> tuple[np.ndarray, np.ndarray]:
    schema = model.schema_set[dataset_id]
    sample = Sample(image, tuple(bbox), np.zeros((schema.landmark_count, 2)), dataset_id, "")
    inp = crop_and_resize(sample, model.config.image_size)
    with torch.no_grad():
        pred = model(torch.from_numpy(inp.crop).to(model.dtype), dataset_id)
    points = inp.to_original(pred.landmarks.double().numpy())
    return points, pixel_covariance(pred.cholesky_raw, inp.crop_transform, model.config.image_size)


def draw_overlay(image: np.ndarray, points: np.ndarray, cov: np.ndarray, path) -> None:
    im = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(im)
    t = np.linspace(0, 2 * np.pi, 48)
    circle = np.stack([np.cos(t), np.sin(t)])
    for p, s in zip(points, cov):
        w, v = np.linalg.eigh(s)
        ring = (v * np.sqrt(np.maximum(w, 0))) @ circle
        draw.line([tuple(q) for q in (ring.T + p)], fill=(255, 200, 0), width=1)
        draw.ellipse([p[0] - 1, p[1] - 1, p[0] + 1, p[1] + 1], fill=(255, 0, 0))
    im.save(path)


def cmd_predict(checkpoint, image, bbox, dataset, overlay=None) -> CommandOutcome:
    model, _, _ = _load_checkpoint(checkpoint)
    try:
        resolve_schema(dataset, model.schema_set.schemas)
    except KeyError as exc:
        raise CliError(4, "unknown-schema", f"unknown schema {dataset!r}") from exc
    j = _dataset_index(model, dataset)
    if not Path(image).exists():
        raise CliError(2, "missing-file", f"image not found: {image}")
    try:
        box = [float(v) for v in bbox.split(",")]
    except ValueError:
        box = []
    if len(box) != 4 or box[2] <= 0 or box[3] <= 0:
        raise CliError(2, "bad-bbox", f"bbox must be x,y,w,h with positive w,h, got {bbox!r}")
    with Image.open(image) as im:
        pixels = np.asarray(im.convert("RGB"))
    try:
        points, cov = predict_image(model, pixels, box, j)
    except DataError as exc:
        raise CliError(2, "bad-bbox", str(exc)) from exc
    print(json.dumps({
        "dataset": dataset,
        "landmarks": points.tolist(),
        "covariance": cov.tolist(),
    }))
    if overlay:
        draw_overlay(pixels, points, cov, overlay)
    return CommandOutcome(0, Path(overlay) if overlay else None)


def cmd_gen_synthetic(schema, count, seed, out) -> CommandOutcome:
    try:
        path = gen_synthetic(schema, count, seed, out)
    except KeyError as exc:
        raise CliError(4, "unknown-schema", f"unknown schema {schema!r}") from exc
    except UnsupportedSchema as exc:
        raise CliError(2, "unsupported-schema", str(exc)) from exc
    print(path)
    return CommandOutcome(0, path)


def cmd_inspect_schema(name, schema_files=()) -> CommandOutcome:
    from .schema import load_schema_file

    try:
        extra = [s for f in schema_files for s in load_schema_file(f)]
    except FileNotFoundError as exc:
        raise CliError(2, "missing-file", str(exc)) from exc
    try:
        schema = resolve_schema(name, extra)
    except KeyError as exc:
        raise CliError(4, "unknown-schema", f"unknown schema {name!r}") from exc
    print(describe(schema))
    return CommandOutcome(0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdmd", description="Multi-dataset facial landmark detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ced-out")
    p.add_argument("--report-out")
    p.add_argument("--normalization", help="override, e.g. bbox or pair:36,45")

    p = sub.add_parser("predict", help="landmarks and pixel covariances for one face")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bbox", required=True, help="x,y,w,h in pixels")
    p.add_argument("--dataset", required=True, help="schema name the checkpoint was trained on")
    p.add_argument("--overlay", help="write an image with means and 1-sigma ellipses")

    p = sub.add_parser("gen-synthetic", help="write a procedural face dataset")
    p.add_argument("--schema", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect-schema", help="print a schema's groups")
    p.add_argument("name")
    p.add_argument("--schema-file", action="append", default=[])
    return parser


def run(argv=None) -> CommandOutcome:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.manifest, args.ced_out, args.report_out, args.normalization)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.image, args.bbox, args.dataset, args.overlay)
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args.schema, args.count, args.seed, args.out)
        return cmd_inspect_schema(args.name, args.schema_file)
    except CliError as exc:
        detail = " ".join(str(exc).split())
        print(f"error: {exc.reason}: {detail}", file=sys.stderr)
        return CommandOutcome(exc.code)
    except SchemaError as exc:
        print(f"error: schema: {' '.join(str(exc).split())}", file=sys.stderr)
        return CommandOutcome(3)
    except ValueError as exc:
        print(f"error: invalid: {' '.join(str(exc).split())}", file=sys.stderr)
        return CommandOutcome(2)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
