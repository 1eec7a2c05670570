"""The four-term training objective and its logit-space gradients.

Source and target classification are plain one-hot cross-entropy; the
distillation term is a temperature-softened cross-entropy whose student
distribution sits outside the log (kept exactly in that orientation, with a
conventional teacher-outside mode behind a flag).  Gradient flow through
the teacher branch is blocked by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractViolation, check_finite, format_float

DISTILL_MODES = ("as_written", "conventional")


@dataclass
class LossBreakdown:
    cls_s: float
    dst: float
    cls_t: float
    pf: float
    weights: tuple[float, float, float, float]
    tau: float
    total: float

    def line(self, step: int) -> str:
        vals = (self.cls_s, self.dst, self.cls_t, self.pf, self.total)
        return f"{step} " + " ".join(format_float(v) for v in vals)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = check_finite("logits", logits)
    shifted = x - np.max(x)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax_vec(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def one_hot(label: int, n_classes: int) -> np.ndarray:
    if not 0 <= label < n_classes:
        raise ContractViolation(f"label {label} outside {n_classes} classes")
    y = np.zeros(n_classes)
    y[label] = 1.0
    return y


def source_cls_loss(logits: np.ndarray, y: np.ndarray) -> float:
    """Cross-entropy of the softmax prediction against a one-hot label."""
    y = check_finite("one-hot label", y)
    if y.shape != np.shape(logits):
        raise ContractViolation("label and logits lengths differ")
    return float(-(y * log_softmax(logits)).sum())


def source_cls_loss_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return softmax_vec(logits) - y


def target_pseudo_loss(logits: np.ndarray, pseudo_label: int,
                       active: np.ndarray | None = None) -> float:
    """Cross-entropy against a pseudo one-hot; inactive classes are rejected."""
    if active is not None and not bool(active[pseudo_label]):
        raise ContractViolation(f"pseudo label {pseudo_label} names an inactive class")
    return source_cls_loss(logits, one_hot(pseudo_label, len(logits)))


def target_pseudo_loss_grad(logits: np.ndarray, pseudo_label: int) -> np.ndarray:
    return source_cls_loss_grad(logits, one_hot(pseudo_label, len(logits)))


def distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
                 tau: float, mode: str = "as_written") -> float:
    """Temperature-softened cross-entropy between the two heads.

    as_written: -sum softmax(student/tau) * log softmax(teacher/tau);
    conventional swaps which distribution sits inside the log.
    """
    if tau <= 0:
        raise ContractViolation("distillation temperature must be positive")
    if mode not in DISTILL_MODES:
        raise ContractViolation(f"unknown distillation mode {mode!r}")
    s = np.asarray(student_logits, dtype=np.float64) / tau
    t = np.asarray(teacher_logits, dtype=np.float64) / tau
    if mode == "as_written":
        p, log_q = softmax_vec(s), log_softmax(t)
    else:
        p, log_q = softmax_vec(t), log_softmax(s)
    return float(-(p * log_q).sum())


def distill_loss_grads(student_logits: np.ndarray, teacher_logits: np.ndarray,
                       tau: float, mode: str = "as_written"):
    """(d/d student, d/d teacher) of distill_loss."""
    if tau <= 0:
        raise ContractViolation("distillation temperature must be positive")
    s = np.asarray(student_logits, dtype=np.float64) / tau
    t = np.asarray(teacher_logits, dtype=np.float64) / tau

    def outside_grad(p, log_q):
        # d/dx of -sum softmax(x) log q: softmax Jacobian applied to -log q
        inner = -(log_q - float((p * log_q).sum()))
        return p * inner

    if mode == "as_written":
        p, q, log_q = softmax_vec(s), softmax_vec(t), log_softmax(t)
        d_student = outside_grad(p, log_q) / tau
        d_teacher = -(p - q) / tau
    else:
        p, q, log_q = softmax_vec(t), softmax_vec(s), log_softmax(s)
        d_student = (q - p) / tau
        d_teacher = outside_grad(p, log_q) / tau
    return d_student, d_teacher


def total_loss(parts, weights, tau: float = 2.0) -> LossBreakdown:
    """Weighted sum of the four loss terms."""
    parts = [float(p) for p in parts]
    weights = tuple(float(w) for w in weights)
    if len(parts) != 4 or len(weights) != 4:
        raise ContractViolation("expected four loss parts and four weights")
    for w in weights:
        if w < 0:
            raise ContractViolation("loss weights must be non-negative")
    for p in parts:
        if not np.isfinite(p):
            raise ContractViolation("loss parts must be finite")
    total = float(sum(w * p for w, p in zip(weights, parts)))
    return LossBreakdown(cls_s=parts[0], dst=parts[1], cls_t=parts[2], pf=parts[3],
                         weights=weights, tau=tau, total=total)
