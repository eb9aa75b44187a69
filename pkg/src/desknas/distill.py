"""Classification and distillation losses with analytic gradients.

Every loss returns ``(loss, grad)`` where ``grad`` is the derivative of the
batch-mean loss with respect to the *student* logits.  Teacher logits are
always treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 0.5
    tau: float = 1.0
    loss: str = "dkd"  # "kd" | "dkd"
    direction: str = "teacher_first"  # or "as_written": KL(student || teacher)
    mode: str = "smd"  # "smd" | "inplace"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if self.loss not in ("kd", "dkd"):
            raise ValueError(f"unknown distillation loss {self.loss!r}")
        if self.direction not in ("as_written", "teacher_first"):
            raise ValueError(f"unknown KL direction {self.direction!r}")
        if self.mode not in ("smd", "inplace"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")

    @property
    def student_first(self) -> bool:
        return self.direction == "as_written"


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def _kl_rows(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probabilities; 0 * log 0 terms vanish."""
    p = np.exp(logp)
    with np.errstate(invalid="ignore"):
        return np.where(p > 0, p * (logp - logq), 0.0).sum(axis=1)


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float = 1.0,
            student_first: bool = False) -> tuple[float, np.ndarray]:
    """Temperature-softened KL divergence scaled by tau**2.

    Default is KL(teacher || student); ``student_first`` gives KL(student || teacher).
    """
    n = student_logits.shape[0]
    log_t = log_softmax(teacher_logits / tau, axis=1)
    log_s = log_softmax(student_logits / tau, axis=1)
    s = np.exp(log_s)
    if student_first:
        kl = _kl_rows(log_s, log_t)
        g = s * (log_s - log_t - kl[:, None])
    else:
        kl = _kl_rows(log_t, log_s)
        g = s - np.exp(log_t)
    scale = tau * tau
    return float(scale * kl.mean()), g * (tau / n)


def _dkd_parts(logits, labels, tau):
    """log p_t, log(1 - p_t) and the log of the renormalised non-target distribution."""
    n, c = logits.shape
    rows = np.arange(n)
    logp = log_softmax(logits / tau, axis=1)
    lp_t = logp[rows, labels]
    masked = logp.copy()
    masked[rows, labels] = -np.inf
    log1m = logsumexp(masked, axis=1)
    log_hat = masked - log1m[:, None]  # -inf at the target column
    return lp_t, log1m, log_hat


def dkd_terms(teacher_logits, student_logits, labels, tau=1.0):
    """Per-example target-class and non-target-class KL terms (teacher first, unscaled)."""
    lpT, l1mT, lhT = _dkd_parts(teacher_logits, labels, tau)
    lpS, l1mS, lhS = _dkd_parts(student_logits, labels, tau)
    pT = np.exp(lpT)
    tc = pT * (lpT - lpS) + np.exp(l1mT) * (l1mT - l1mS)
    nc = _kl_rows(lhT, lhS)
    return tc, nc, pT


def dkd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, labels: np.ndarray,
             cfg: DistillConfig = DistillConfig()) -> tuple[float, np.ndarray]:
    """alpha * KL over (target, rest) + beta * KL over the renormalised non-target classes."""
    tau = cfg.tau
    n, c = student_logits.shape
    rows = np.arange(n)
    lpT, l1mT, lhT = _dkd_parts(teacher_logits, labels, tau)
    lpS, l1mS, lhS = _dkd_parts(student_logits, labels, tau)
    pT, pS = np.exp(lpT), np.exp(lpS)
    hS = np.exp(lhS)
    onehot = np.zeros((n, c))
    onehot[rows, labels] = 1.0
    # d(log p_t - log(1-p_t)) / du_k = [k == t] - [k != t] * hS_k
    dm_du = onehot - hS
    if cfg.student_first:
        tc = pS * (lpS - lpT) + np.exp(l1mS) * (l1mS - l1mT)
        dtc_dm = pS * np.exp(l1mS) * ((lpS - lpT) - (l1mS - l1mT))
        nc = _kl_rows(lhS, lhT)
        with np.errstate(invalid="ignore"):
            diff = np.where(onehot > 0, 0.0, lhS - lhT)
        dnc = hS * (diff - nc[:, None])
    else:
        tc = pT * (lpT - lpS) + np.exp(l1mT) * (l1mT - l1mS)
        dtc_dm = pS - pT
        nc = _kl_rows(lhT, lhS)
        dnc = hS - np.exp(lhT)
    g = cfg.alpha * dtc_dm[:, None] * dm_du + cfg.beta * dnc
    loss = cfg.alpha * tc + cfg.beta * nc
    return float(tau * tau * loss.mean()), g * (tau / n)


def pair_loss(teacher_logits, student_logits, labels, cfg: DistillConfig):
    if cfg.loss == "kd":
        return kd_loss(teacher_logits, student_logits, cfg.tau, cfg.student_first)
    return dkd_loss(teacher_logits, student_logits, labels, cfg)


def smd_losses(logits_list: Sequence[np.ndarray], labels: np.ndarray,
               cfg: DistillConfig = DistillConfig()) -> tuple[float, list[np.ndarray]]:
    """Sandwich loss over subnets ordered by ascending capacity.

    The largest subnet is fit to the labels.  In ``smd`` mode subnet i learns
    from the mean of its pair losses against every larger subnet; in
    ``inplace`` mode only the largest subnet teaches.
    """
    k = len(logits_list)
    if k < 2:
        raise ValueError("sandwich loss needs at least two subnets")
    total, g_max = softmax_xent(logits_list[-1], labels)
    grads = [np.zeros_like(lg) for lg in logits_list]
    grads[-1] = g_max
    for i in range(k - 1):
        teachers = range(i + 1, k) if cfg.mode == "smd" else (k - 1,)
        w = 1.0 / len(teachers)
        for j in teachers:
            loss, g = pair_loss(logits_list[j], logits_list[i], labels, cfg)
            total += w * loss
            grads[i] += w * g
    return total, grads
