"""Pretraining objectives: contrastive (ITC), masked image (CMIM), masked text (CMLM).

Every loss returns a :class:`LossResult` carrying the value and analytic
gradients keyed by input name.

The contrastive loss is the symmetric InfoNCE negative log-likelihood: one
cross-entropy over image->text rows and one over text->image rows (the
second softmax normalizes over images), each averaged over ``N`` and halved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Matrix,
    ShapeError,
    as_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    log_softmax_rows,
    matmul,
)

TAU_MIN = 1e-3
TAU_MAX = 1e2
DEFAULT_TAU = 0.07


@dataclass
class Temperature:
    """Learnable softmax temperature stored as ``log_tau``."""

    log_tau: float = math.log(DEFAULT_TAU)

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        return cls(math.log(tau)).clamped()

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def clamped(self) -> "Temperature":
        return Temperature(min(max(self.log_tau, math.log(TAU_MIN)), math.log(TAU_MAX)))


@dataclass
class EmbeddingBatch:
    v_cls: Matrix
    t_cls: Matrix

    def __post_init__(self):
        self.v_cls = as_matrix(self.v_cls, "v_cls")
        self.t_cls = as_matrix(self.t_cls, "t_cls")
        if self.v_cls.shape != self.t_cls.shape:
            raise ShapeError(f"image rows {self.v_cls.shape} and text rows {self.t_cls.shape} differ")

    @property
    def n(self) -> int:
        return self.v_cls.shape[0]

    @property
    def d(self) -> int:
        return self.v_cls.shape[1]


@dataclass
class MaskedImageTarget:
    """Masked patches: ``x`` original pixels, ``x_hat`` reconstruction, both M x P."""

    x: Matrix
    x_hat: Matrix

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        self.x_hat = as_matrix(self.x_hat, "x_hat")
        if self.x.shape != self.x_hat.shape:
            raise ShapeError(f"target {self.x.shape} and reconstruction {self.x_hat.shape} differ")


@dataclass
class MaskedTextTarget:
    logits: Matrix
    labels: np.ndarray

    def __post_init__(self):
        self.logits = as_matrix(self.logits, "logits")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.logits.shape[0]:
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.logits.shape[0]} logit rows")
        q = self.logits.shape[1]
        if np.any(self.labels < 0) or np.any(self.labels >= q):
            raise ValueError(f"labels must lie in [0, {q})")


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha} beta={self.beta}")


@dataclass
class LossResult:
    value: float
    grads: dict[str, Matrix] = field(default_factory=dict)
    grad_log_tau: float | None = None


def itc_loss(batch: EmbeddingBatch, temp: Temperature, normalize: bool = True) -> LossResult:
    """Symmetric InfoNCE over the ``N x N`` similarity logits.

    Gradients are returned for ``v_cls`` and ``t_cls`` (through the optional
    row normalization) and for ``log_tau``.
    """
    n = batch.n
    if n == 0:
        raise ValueError("contrastive loss needs at least one pair")
    v_raw, t_raw = batch.v_cls, batch.t_cls
    v = l2_normalize_rows(v_raw) if normalize else v_raw
    t = l2_normalize_rows(t_raw) if normalize else t_raw

    inv_tau = math.exp(-temp.log_tau)
    sim = matmul(v, t.T)
    logits = sim * inv_tau
    lsm_i2t = log_softmax_rows(logits)
    lsm_t2i = log_softmax_rows(logits.T)
    diag = np.arange(n)
    value = -(lsm_i2t[diag, diag].sum() + lsm_t2i[diag, diag].sum()) / (2 * n)

    # dL/dlogits = ((P_i2t - I) + (P_t2i - I)^T) / 2N
    eye = np.eye(n)
    g_logits = ((np.exp(lsm_i2t) - eye) + (np.exp(lsm_t2i) - eye).T) / (2 * n)
    g_sim = g_logits * inv_tau
    g_v = matmul(g_sim, t)
    g_t = matmul(g_sim.T, v)
    if normalize:
        g_v = l2_normalize_rows_backward(v_raw, g_v)
        g_t = l2_normalize_rows_backward(t_raw, g_t)
    grad_log_tau = -float((g_logits * logits).sum())
    return LossResult(float(max(value, 0.0)), {"v_cls": g_v, "t_cls": g_t}, grad_log_tau)


def cmim_loss(target: MaskedImageTarget) -> LossResult:
    """Mean over masked patches of the per-patch summed squared pixel error."""
    m = target.x.shape[0]
    if m == 0:
        raise ValueError("masked image loss needs at least one masked patch")
    diff = target.x_hat - target.x
    value = float((diff * diff).sum() / m)
    return LossResult(value, {"x_hat": 2.0 * diff / m})


def cmlm_loss(target: MaskedTextTarget) -> LossResult:
    n_tok = target.logits.shape[0]
    if n_tok == 0:
        raise ValueError("masked text loss needs at least one masked token")
    lsm = log_softmax_rows(target.logits)
    rows = np.arange(n_tok)
    value = float(-lsm[rows, target.labels].sum() / n_tok)
    grad = np.exp(lsm)
    grad[rows, target.labels] -= 1.0
    return LossResult(value, {"logits": grad / n_tok})


def overall_loss(itc: LossResult, cmim: LossResult, cmlm: LossResult, w: LossWeights) -> LossResult:
    """``itc + alpha * cmim + beta * cmlm`` with gradients combined alike."""
    if w.alpha < 0 or w.beta < 0:
        raise ValueError(f"loss weights must be non-negative, got alpha={w.alpha} beta={w.beta}")
    grads: dict[str, Matrix] = {}
    for coef, part in ((1.0, itc), (w.alpha, cmim), (w.beta, cmlm)):
        for name, g in part.grads.items():
            grads[name] = grads[name] + coef * g if name in grads else coef * g
    taus = [coef * p.grad_log_tau for coef, p in ((1.0, itc), (w.alpha, cmim), (w.beta, cmlm))
            if p.grad_log_tau is not None]
    value = itc.value + w.alpha * cmim.value + w.beta * cmlm.value
    return LossResult(value, grads, sum(taus) if taus else None)
