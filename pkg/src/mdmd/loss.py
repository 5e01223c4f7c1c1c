"""Laplacian log-likelihood with a Cholesky-parameterized covariance, plus the grouped aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import PredictionSet
from .schema import DatasetSchema

CHOL_EPS = 1e-6
SQRT3 = math.sqrt(3.0)


@dataclass
class CholeskyFactor:
    """Lower-triangular ``[[a, 0], [b, c]]``; tensors broadcast over leading dims."""

    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor

    def matrix(self) -> torch.Tensor:
        zero = torch.zeros_like(self.a)
        return torch.stack([torch.stack([self.a, zero], -1), torch.stack([self.b, self.c], -1)], -2)

    def covariance(self) -> torch.Tensor:
        L = self.matrix()
        return L @ L.transpose(-1, -2)


def decode_cholesky(raw: torch.Tensor, eps: float = CHOL_EPS) -> CholeskyFactor:
    """Map unconstrained (..., 3) head outputs to a factor with strictly positive diagonal."""
    raw = torch.as_tensor(raw)
    return CholeskyFactor(F.softplus(raw[..., 0]) + eps, raw[..., 1], F.softplus(raw[..., 2]) + eps)


def laplacian_nll(mu: torch.Tensor, factor: CholeskyFactor, gt: torch.Tensor) -> torch.Tensor:
    """``0.5 log|S| + sqrt(3 d^T S^-1 d)`` with ``S = L L^T`` and ``d = mu - gt``, elementwise over (..., 2)."""
    d = mu - gt
    # forward substitution L z = d, so d^T S^-1 d = |z|^2
    z1 = d[..., 0] / factor.a
    z2 = (d[..., 1] - factor.b * z1) / factor.c
    half_logdet = torch.log(factor.a) + torch.log(factor.c)
    # vector_norm has a zero subgradient at d = 0, unlike sqrt of the squared norm
    return half_logdet + SQRT3 * torch.linalg.vector_norm(torch.stack([z1, z2], -1), dim=-1)


def _check_shapes(pred: PredictionSet, gt: torch.Tensor, schema: DatasetSchema) -> None:
    n = schema.landmark_count
    if pred.landmarks.shape[-2:] != (n, 2) or gt.shape[-2:] != (n, 2):
        raise ValueError(
            f"{schema.name}: expected (..., {n}, 2) landmarks, got pred {tuple(pred.landmarks.shape)}, gt {tuple(gt.shape)}"
        )
    if pred.cholesky_raw.shape[-2:] != (n, 3):
        raise ValueError(f"{schema.name}: expected (..., {n}, 3) cholesky params, got {tuple(pred.cholesky_raw.shape)}")


def group_weights(schema: DatasetSchema, dtype=torch.float64) -> torch.Tensor:
    """Per-landmark weight 1 / (non-empty groups * group size), in canonical order."""
    nonempty = [g for g in schema.groups if g]
    w = torch.zeros(schema.landmark_count, dtype=dtype)
    for g in nonempty:
        w[list(g)] = 1.0 / (len(nonempty) * len(g))
    return w


def aggregate(per_landmark: torch.Tensor, schema: DatasetSchema) -> torch.Tensor:
    """Mean over non-empty groups of the within-group mean; reduces the last dim (N)."""
    w = group_weights(schema, per_landmark.dtype).to(per_landmark.device)
    return (per_landmark * w).sum(-1)


def mdmd_loss(pred: PredictionSet, gt: torch.Tensor, schema: DatasetSchema) -> torch.Tensor:
    gt = torch.as_tensor(gt, dtype=pred.landmarks.dtype)
    _check_shapes(pred, gt, schema)
    per = laplacian_nll(pred.landmarks, decode_cholesky(pred.cholesky_raw), gt)
    return aggregate(per, schema)


def euclidean_loss(pred: PredictionSet, gt: torch.Tensor, schema: DatasetSchema) -> torch.Tensor:
    gt = torch.as_tensor(gt, dtype=pred.landmarks.dtype)
    _check_shapes(pred, gt, schema)
    per = torch.linalg.vector_norm(pred.landmarks - gt, dim=-1)
    return aggregate(per, schema)


LOSSES = {"laplacian": mdmd_loss, "euclidean": euclidean_loss}
