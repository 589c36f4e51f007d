"""Masked-token cross-entropy, symmetric InfoNCE and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, UsageError
from .model import BranchOutput
from .numerics import Tensor

__all__ = ["LossBreakdown", "mim_loss", "beit_loss", "infonce", "total_loss"]


@dataclass
class LossBreakdown:
    total: Tensor
    mim: float | None
    nce: float | None
    weights: tuple[float, float]

    def values(self) -> dict[str, float | None]:
        return {"loss_total": float(self.total.data), "loss_mim": self.mim, "loss_nce": self.nce}


def _targets_at(targets: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return np.take_along_axis(np.asarray(targets), positions, axis=1)


def mim_loss(branch_a: BranchOutput, branch_b: BranchOutput | None, targets) -> Tensor:
    """Cross-entropy over both branches' predictions; each grid position is counted once per image.

    With ``branch_b=None`` only branch A's positions are scored.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    branches = [branch_a] if branch_b is None else [branch_a, branch_b]
    if branch_b is not None:
        pos = np.concatenate([branch_a.positions, branch_b.positions], axis=1)
        if pos.shape != targets.shape or not (np.sort(pos, axis=1) == np.arange(targets.shape[1])).all():
            raise UsageError("branch prediction positions must partition the patch grid")
    logits, labels = [], []
    for br in branches:
        Bn, k, V = br.logits.shape
        if br.positions.shape != (Bn, k):
            raise UsageError(f"logits {br.logits.shape} misaligned with positions {br.positions.shape}")
        logits.append(nx.reshape(br.logits, (Bn * k, V)))
        labels.append(_targets_at(targets, br.positions).reshape(-1))
    stacked = nx.concat(logits, axis=0) if len(logits) > 1 else logits[0]
    return nx.cross_entropy_logits(stacked, np.concatenate(labels))


def beit_loss(logits: Tensor, targets, masked: np.ndarray) -> Tensor:
    Bn, k, V = logits.shape
    labels = _targets_at(np.atleast_2d(targets), np.atleast_2d(masked)).reshape(-1)
    return nx.cross_entropy_logits(nx.reshape(logits, (Bn * k, V)), labels)


def infonce(xa, xb, tau: float = 0.2) -> Tensor:
    """Symmetric InfoNCE with in-batch negatives.

    Row ``i`` of ``xa`` is the positive for row ``i`` of ``xb``; every other
    row of the opposite side is a negative.  Returns the mean over the batch
    of the two directions' negative log-probabilities, averaged.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    xa, xb = nx._as_tensor(xa), nx._as_tensor(xb)
    if xa.ndim != 2 or xa.shape != xb.shape:
        raise nx.DimensionError(f"infonce needs two (B, dim) arrays, got {xa.shape} and {xb.shape}")
    labels = np.arange(xa.shape[0])
    sim = nx.scale(nx.matmul(xa, nx.transpose(xb)), 1.0 / tau)
    loss_a = nx.cross_entropy_logits(sim, labels)
    loss_b = nx.cross_entropy_logits(nx.transpose(sim), labels)
    return nx.scale(nx.add(loss_a, loss_b), 0.5)


def total_loss(branch_a: BranchOutput, branch_b: BranchOutput, targets, tau: float = 0.2,
               w_mim: float = 1.0, w_nce: float = 1.0) -> LossBreakdown:
    """``w_mim * mim + w_nce * nce``; a zero weight skips its term entirely."""
    if w_mim < 0 or w_nce < 0 or (w_mim == 0 and w_nce == 0):
        raise ConfigError(f"loss weights must be >= 0 and not both zero, got ({w_mim}, {w_nce})")
    terms = []
    mim_val = nce_val = None
    if w_mim > 0:
        m = mim_loss(branch_a, branch_b, targets)
        mim_val = float(m.data)
        terms.append(nx.scale(m, w_mim))
    if w_nce > 0:
        c = infonce(branch_a.descriptor, branch_b.descriptor, tau)
        nce_val = float(c.data)
        terms.append(nx.scale(c, w_nce))
    total = terms[0] if len(terms) == 1 else nx.add(terms[0], terms[1])
    return LossBreakdown(total, mim_val, nce_val, (w_mim, w_nce))
