"""Multi-dataset training: one dataset per mini-batch, Adam with linear decay."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt
from .data import AugmentPolicy, Dataset, ModelInput, augment, prepare, read_dataset
from .loss import LOSSES
from .metrics import MetricReport, evaluate
from .model import MdmdModel, ModelConfig
from .schema import SchemaSet, load_schema_file, per_landmark

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    datasets: list[str]
    model: dict = field(default_factory=dict)
    schema_files: list[str] = field(default_factory=list)
    batch_size: int = 16
    total_steps: int = 1000
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    loss_mode: str = "laplacian"
    token_mode: str = "flsg"
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str = "runs/default"
    margin: float = 0.25
    augment: dict | str | None = None
    precision: str = "single"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.loss_mode not in LOSSES:
            raise ValueError(f"loss_mode must be one of {sorted(LOSSES)}")
        if self.token_mode not in ("flsg", "per-landmark"):
            raise ValueError("token_mode must be 'flsg' or 'per-landmark'")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if not self.datasets:
            raise ValueError("at least one dataset manifest is required")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if base_dir is not None:
            base = Path(base_dir)
            for key in ("datasets", "schema_files"):
                d[key] = [str(base / p) for p in d.get(key, [])]
            if "out_dir" in d:
                d["out_dir"] = str(base / d["out_dir"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        return cls.from_dict(yaml.safe_load(path.read_text()) or {}, base_dir=path.parent)


@dataclass
class Batch:
    dataset_id: int
    items: list[ModelInput]

    @property
    def face_ids(self) -> list[str]:
        return [it.face_id for it in self.items]

    def images(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.stack([it.crop for it in self.items])).to(dtype)

    def targets(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.stack([it.landmarks_norm for it in self.items])).to(dtype)


def sample_indices(sizes: Sequence[int], rng: np.random.Generator, batch_size: int) -> tuple[int, np.ndarray]:
    """Pick a dataset uniformly, then ``batch_size`` of its samples uniformly with replacement."""
    if not sizes:
        raise ValueError("no datasets to sample from")
    for j, n in enumerate(sizes):
        if n < 1:
            raise ValueError(f"dataset {j} is empty")
    j = int(rng.integers(len(sizes)))
    return j, rng.integers(sizes[j], size=batch_size)


def sample_batch(datasets: Sequence[Sequence[ModelInput]], rng: np.random.Generator, batch_size: int) -> Batch:
    j, idx = sample_indices([len(d) for d in datasets], rng, batch_size)
    return Batch(j, [datasets[j][int(k)] for k in idx])


def lr_at(step: int, config: TrainConfig) -> float:
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    return config.base_lr * (1.0 - step / config.total_steps)


def build_schema_set(datasets: Sequence[Dataset], token_mode: str = "flsg") -> SchemaSet:
    schemas = SchemaSet(tuple(d.schema for d in datasets), datasets[0].schema.group_count)
    return per_landmark(schemas) if token_mode == "per-landmark" else schemas


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        extra = [s for f in config.schema_files for s in load_schema_file(f)]
        self.datasets = [read_dataset(m, extra, dataset_id=j) for j, m in enumerate(config.datasets)]
        self.schema_set = build_schema_set(self.datasets, config.token_mode)
        self.model_config = ModelConfig.from_dict(config.model)
        self.inputs = [prepare(d, self.model_config.image_size, config.margin) for d in self.datasets]
        self.policy = AugmentPolicy.from_dict(config.augment)
        self.loss_fn = LOSSES[config.loss_mode]
        torch.manual_seed(config.seed)
        self.model = MdmdModel(self.model_config, self.schema_set, seed=config.seed, dtype=config.dtype)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.base_lr, betas=config.betas, eps=config.adam_eps
        )
        self.step = 0
        self.history: list[tuple[int, int, float, float]] = []
        self.dataset_steps: Counter = Counter()

    # -- sampling ------------------------------------------------------------
    def batch_for_step(self, step: int) -> Batch:
        """Batch for ``step``: depends only on (seed, step), so resumed runs replay exactly."""
        seed = self.config.seed
        batch = sample_batch(self.inputs, np.random.default_rng([seed, step, 0]), self.config.batch_size)
        perm = self.datasets[batch.dataset_id].schema.flip_permutation
        items = [
            augment(it, self.policy, np.random.default_rng([seed, step, 1, k]), perm)
            for k, it in enumerate(batch.items)
        ]
        return Batch(batch.dataset_id, items)

    # -- optimization --------------------------------------------------------
    def batch_loss(self, batch: Batch) -> torch.Tensor:
        dtype = self.model.dtype
        pred = self.model(batch.images(dtype), batch.dataset_id)
        schema = self.schema_set[batch.dataset_id]
        return self.loss_fn(pred, batch.targets(dtype), schema).mean()

    def train_step(self, batch: Batch) -> float:
        lr = lr_at(self.step, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.batch_loss(batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLoss(
                f"non-finite loss {value} at step {self.step}, dataset {batch.dataset_id}, faces {batch.face_ids}"
            )
        loss.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.history.append((self.step, batch.dataset_id, lr, value))
        self.dataset_steps[batch.dataset_id] += 1
        self.step += 1
        return value

    # -- persistence ---------------------------------------------------------
    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.out_dir / f"step_{self.step:06d}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        return ckpt.save_checkpoint(path, self.model, self.step, self.optimizer, self.config.to_dict())

    def restore(self, path: str | Path) -> None:
        header, arrays = ckpt.read_checkpoint(path)
        if header["schema_fingerprint"] != self.schema_set.fingerprint():
            raise ckpt.FingerprintMismatch(
                f"{path}: schema fingerprint {header['schema_fingerprint']} does not match the configured datasets"
            )
        ckpt.load_parameters(self.model, arrays)
        ckpt.load_optimizer_state(self.optimizer, self.model, arrays)
        self.step = int(header["step"])

    def fit(self, resume: str | Path | None = None, log_file: str | Path | None = None) -> Path:
        if resume is not None:
            self.restore(resume)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = Path(log_file) if log_file else self.out_dir / "train_log.csv"
        rows = ["step,dataset_id,lr,loss\n"]
        if resume is not None and log_path.exists():
            # keep rows up to the checkpoint; later ones are replayed
            rows += [ln for ln in log_path.read_text().splitlines(keepends=True)[1:]
                     if ln.strip() and int(ln.split(",", 1)[0]) < self.step]
        with open(log_path, "w") as fh:
            fh.writelines(rows)
            while self.step < self.config.total_steps:
                batch = self.batch_for_step(self.step)
                value = self.train_step(batch)
                _, j, lr, _ = self.history[-1]
                fh.write(f"{self.step - 1},{j},{lr!r},{value!r}\n")
                if self.step % 100 == 0:
                    log.info("step %d dataset %d lr %.3g loss %.5f", self.step - 1, j, lr, value)
                every = self.config.checkpoint_every
                if every and self.step % every == 0 and self.step < self.config.total_steps:
                    self.save()
        log.info("per-dataset steps: %s", dict(sorted(self.dataset_steps.items())))
        return self.save(self.out_dir / "final.npz")

    # -- evaluation ----------------------------------------------------------
    def evaluate(self, dataset_id: int, normalization=None) -> MetricReport:
        return evaluate_inputs(self.model, self.inputs[dataset_id], dataset_id,
                               self.datasets[dataset_id].schema, normalization)


@torch.no_grad()
def predict_inputs(model: MdmdModel, inputs: Sequence[ModelInput], dataset_id: int,
                   batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Crop-frame means (F, N, 2) and raw Cholesky parameters (F, N, 3)."""
    lms, chols = [], []
    for start in range(0, len(inputs), batch_size):
        chunk = inputs[start:start + batch_size]
        images = torch.from_numpy(np.stack([it.crop for it in chunk])).to(model.dtype)
        pred = model(images, dataset_id)
        lms.append(pred.landmarks.cpu().numpy())
        chols.append(pred.cholesky_raw.cpu().numpy())
    return np.concatenate(lms), np.concatenate(chols)


def evaluate_inputs(model: MdmdModel, inputs: Sequence[ModelInput], dataset_id: int, schema,
                    normalization=None) -> MetricReport:
    preds, _ = predict_inputs(model, inputs, dataset_id)
    return evaluate(
        preds,
        [it.landmarks for it in inputs],
        schema,
        bboxes=[it.bbox for it in inputs],
        transforms=[it.crop_transform for it in inputs],
        image_size=model.config.image_size,
        normalization=normalization,
    )


def fit(config: TrainConfig, resume: str | Path | None = None) -> Path:
    return Trainer(config).fit(resume)
