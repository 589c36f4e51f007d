"""Finite-difference checks for every differentiable operation and one full training step.

Everything runs in float64.  Linear operations are held to a tighter bound
than nonlinear ones because central differences are exact for them up to
rounding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .losses import infonce, total_loss
from .masking import make_plans
from .model import Model, ModelConfig
from .numerics import Tensor

__all__ = ["LINEAR_TOL", "NONLINEAR_TOL", "SuiteResult", "run_suite", "splitmask_step_check"]

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4


@dataclass
class SuiteResult:
    op: str
    linear: bool
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection turns any output into a scalar without symmetry
    return nx.tsum(nx.mul(out, Tensor(w)))


def _cases(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 5)
    c, d = _t(rng, 3, 4), _t(rng, 3, 4)
    batched = _t(rng, 2, 3, 4)
    bias = _t(rng, 4)
    table = _t(rng, 6, 3)
    seq = _t(rng, 2, 5, 3)
    logits = _t(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    probs = rng.dirichlet(np.ones(7), size=5)
    gain = Tensor(1 + 0.1 * rng.standard_normal(4), requires_grad=True)
    lnb = _t(rng, 4, scale=0.1)
    xa, xb = _t(rng, 4, 6), _t(rng, 4, 6)
    idx = np.array([[0, 3, 4], [2, 1, 1]])
    w = lambda *s: rng.standard_normal(s)  # noqa: E731

    w35, w34, w234, w43, w12, w23, w233 = w(3, 5), w(3, 4), w(2, 3, 4), w(4, 3), w(12), w(2, 3), w(2, 3, 3)
    w235, w24, w38, w22, w57, w46 = w(2, 3, 5), w(2, 4), w(3, 8), w(2, 2), w(5, 7), w(4, 6)
    yield "matmul", True, lambda: _weighted(nx.matmul(a, b), w35), [a, b]
    yield "matmul_batched", True, lambda: _weighted(nx.matmul(batched, b), w235), [batched, b]
    yield "add", True, lambda: _weighted(nx.add(c, d), w34), [c, d]
    yield "sub", True, lambda: _weighted(nx.sub(c, d), w34), [c, d]
    yield "mul", False, lambda: _weighted(nx.mul(c, d), w34), [c, d]
    yield "scale", True, lambda: _weighted(nx.scale(c, -1.7), w34), [c]
    yield "add_bias", True, lambda: _weighted(nx.add_bias(batched, bias), w234), [batched, bias]
    yield "tsum", True, lambda: nx.tsum(c), [c]
    yield "mean", True, lambda: _weighted(nx.mean(batched, axis=1), w24), [batched]
    yield "reshape", True, lambda: _weighted(nx.reshape(c, (12,)), w12), [c]
    yield "transpose", True, lambda: _weighted(nx.transpose(c), w43), [c]
    yield "concat", True, lambda: _weighted(nx.concat([c, d], axis=1), w38), [c, d]
    yield "getitem", True, lambda: _weighted(c[1:, ::2], w22), [c]
    yield "take", True, lambda: _weighted(nx.take(table, np.array([[0, 5, 5], [2, 1, 0]])), w233), [table]
    yield "gather_rows", True, lambda: _weighted(nx.gather_rows(seq, idx), w233), [seq]
    yield "mean_pool", True, lambda: _weighted(nx.mean_pool(seq), w23), [seq]
    yield "gelu", False, lambda: _weighted(nx.gelu(c), w34), [c]
    yield "softmax", False, lambda: _weighted(nx.softmax(logits, axis=-1), w57), [logits]
    yield "layernorm", False, lambda: _weighted(nx.layernorm(batched, gain, lnb), w234), [batched, gain, lnb]
    yield "cross_entropy_logits", False, lambda: nx.cross_entropy_logits(logits, targets), [logits]
    yield "cross_entropy_soft", False, lambda: nx.cross_entropy_soft(logits, probs), [logits]
    yield "l2_normalize", False, lambda: _weighted(nx.l2_normalize(xa), w46), [xa]
    yield "infonce", False, lambda: infonce(nx.l2_normalize(xa), nx.l2_normalize(xb), 0.2), [xa, xb]


def splitmask_step_check(seed: int = 0, tol: float = NONLINEAR_TOL) -> nx.GradCheckReport:
    """Gradient of the full SplitMask loss (MIM + InfoNCE) with respect to every parameter."""
    with nx.precision(np.float64):
        cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, encoder_depth=1, decoder_depth=1,
                          num_heads=2, mlp_ratio=2, vocab_size=5, init_std=0.3)
        model = Model.init(cfg, seed)
        rng = np.random.default_rng(seed)
        patches = rng.random((2, cfg.n, cfg.patch_dim))
        targets = rng.integers(0, cfg.vocab_size, size=(2, cfg.n))
        plans = make_plans("uniform", 2, cfg.grid, 0.5, rng)

        def loss():
            a, b = model.forward_splitmask(patches, plans)
            return total_loss(a, b, targets, 0.2, 1.0, 1.0).total

        return nx.grad_check(loss, model.params, tol=tol)


def run_suite(seed: int = 0, include_model: bool = True) -> list[SuiteResult]:
    out = []
    with nx.precision(np.float64):
        rng = np.random.default_rng(seed)
        for name, linear, f, inputs in _cases(rng):
            tol = LINEAR_TOL if linear else NONLINEAR_TOL
            t0 = time.perf_counter()
            rep = nx.grad_check(f, inputs, tol=tol)
            out.append(SuiteResult(name, linear, rep.max_rel_error, tol, time.perf_counter() - t0))
    if include_model:
        t0 = time.perf_counter()
        rep = splitmask_step_check(seed)
        out.append(SuiteResult("splitmask_step", False, rep.max_rel_error, NONLINEAR_TOL, time.perf_counter() - t0))
    return out
