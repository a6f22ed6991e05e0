"""Training objectives: prediction, gate sparsity and batch negative entropy,
plus the distillation losses used to train the small gating networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# g_L value of each of the five LiDAR segments, leftmost to rightmost
SEGMENT_POSITIONS = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float
    kd_weight: float
    student_loss_kind: str  # "mse" | "cross_entropy"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValueError("kd_weight must lie in [0, 1]")
        if self.student_loss_kind not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown student loss {self.student_loss_kind!r}")


STAGE_1_1_WEIGHTS = LossWeights(alpha=0.001, beta=0.0016)
STAGE_2_1_WEIGHTS = LossWeights(alpha=0.002, beta=0.0)
LIDAR_GATE_DISTILL = DistillConfig(temperature=2.0, kd_weight=0.9, student_loss_kind="mse")
MAIN_GATE_DISTILL = DistillConfig(temperature=4.0, kd_weight=0.9, student_loss_kind="cross_entropy")


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _rows(g):
    g = _t(g)
    return T.reshape(g, (1, -1)) if g.data.ndim == 1 else g


def prediction_loss(y, y_hat):
    """Mean squared steering error over the batch."""
    y_hat = _t(y_hat)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=y_hat.dtype).reshape(y_hat.shape)
    return T.tmean(T.square(y_hat - y))


def sparsity_loss(g):
    """Batch mean of the gate entropy  -sum_i g_i log g_i  (natural log)."""
    g = _rows(g)
    return T.mul(T.tmean(T.tsum(T.xlogx(g), axis=1)), -1.0)


def nentropy_loss(g):
    """Negative entropy  sum_i p_i log p_i  of the batch-mean gate p."""
    g = _rows(g)
    return T.tsum(T.xlogx(T.tmean(g, axis=0)))


def combined_loss(y, y_hat, gate, w: LossWeights):
    loss = prediction_loss(y, y_hat)
    if w.alpha:
        loss = loss + T.mul(sparsity_loss(gate), w.alpha)
    if w.beta:
        loss = loss + T.mul(nentropy_loss(gate), w.beta)
    return loss


def scalar_gate_label(teacher_g):
    """Expected segment position  sum_i g_i r_i  of a 5-way gate (numpy)."""
    return np.asarray(teacher_g, dtype=np.float64) @ SEGMENT_POSITIONS


def onehot_gate_label(teacher_g):
    """One-hot at the argmax (first index wins ties), row-wise."""
    g = np.asarray(teacher_g)
    out = np.zeros(g.shape, dtype=np.float64)
    idx = g.argmax(axis=-1)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def softmax_np(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_term(student_logits, teacher_logits, temperature):
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch mean."""
    s = _rows(student_logits)
    pt = softmax_np(np.atleast_2d(teacher_logits), temperature)
    log_pt = np.log(np.clip(pt, 1e-300, None))
    log_ps = T.log_softmax(T.mul(s, 1.0 / temperature), axis=1)
    const = float((pt * log_pt).sum(axis=1).mean())
    cross = T.tmean(T.tsum(T.mul(log_ps, pt.astype(s.dtype)), axis=1))
    return T.mul(T.add(T.mul(cross, -1.0), const), temperature ** 2)


def student_term(student_logits, hard_label, kind):
    s = _rows(student_logits)
    if kind == "mse":
        # hard_label: teacher scalar g_L per row
        probs = T.softmax(s, axis=1)
        pred = T.dense(probs, Tensor(SEGMENT_POSITIONS.reshape(1, -1).astype(s.dtype)))
        target = np.asarray(hard_label, dtype=s.dtype).reshape(-1, 1)
        return T.tmean(T.square(pred - target))
    # cross entropy against a one-hot (or soft) target
    target = np.atleast_2d(np.asarray(hard_label, dtype=s.dtype))
    return T.mul(T.tmean(T.tsum(T.mul(T.log_softmax(s, axis=1), target), axis=1)), -1.0)


def distill_loss(student_logits, teacher_logits, cfg: DistillConfig, hard_label):
    """kd_weight * T^2 KL(teacher_T || student_T) + (1 - kd_weight) * student loss."""
    parts = []
    if cfg.kd_weight > 0:
        parts.append(T.mul(kd_term(student_logits, teacher_logits, cfg.temperature), cfg.kd_weight))
    if cfg.kd_weight < 1:
        parts.append(T.mul(student_term(student_logits, hard_label, cfg.student_loss_kind),
                           1.0 - cfg.kd_weight))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out
