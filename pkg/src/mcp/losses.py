"""Training objectives: speed-perception hinge, instance InfoNCE, and their mix.

All losses accept single feature vectors or (N, D) batches; batches reduce
by the mean. Inputs may be plain arrays (oracle checks) or graph tensors
(training); outputs are scalar tensors either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0  # hinge margin
    tau: float = 0.1    # softmax temperature
    alpha: float = 0.5  # weight of the speed-perception branch

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class LossValue:
    total: float
    mip: float
    cip: float


def make_loss_value(mip: float, cip: float, alpha: float) -> LossValue:
    return LossValue(total=float(combined_loss(mip, cip, alpha)),
                     mip=float(mip), cip=float(cip))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def mip_loss(f_r, f_l1, f_l2, gamma: float = 2.0) -> Tensor:
    """Hinge on the similarity gap: max(gamma - (sim_same - sim_other), 0).

    The same-speed motion clip must beat the other-speed one by the margin.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    f_r, f_l1, f_l2 = _t(f_r), _t(f_l1), _t(f_l2)
    pos = (f_r * f_l1).sum(axis=-1)
    neg = (f_r * f_l2).sum(axis=-1)
    return (gamma - (pos - neg)).relu().mean()


def _logsumexp_rows(logits: Tensor) -> Tensor:
    # subtracting the (detached-equivalent) row max keeps exp in range;
    # the max term's subgradient cancels analytically
    m = logits.max(axis=-1, keepdims=True)
    return (logits - m).exp().sum(axis=-1).log() + m.reshape(m.data.shape[:-1])


def cip_loss(f_r, bank, positive_index: int, tau: float = 0.1) -> Tensor:
    """InfoNCE of one query against a bank holding its positive.

    The denominator sums over every bank entry, the positive included.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    f_r = _t(f_r)
    if not isinstance(bank, Tensor):
        bank = Tensor(np.stack([np.asarray(e, dtype=np.float64) for e in bank])
                      if not isinstance(bank, np.ndarray) else bank)
    n = bank.data.shape[0]
    if n < 1:
        raise ValueError("bank must be non-empty")
    if not 0 <= positive_index < n:
        raise ValueError(f"positive index {positive_index} outside bank of {n}")
    logits = bank.matmul(f_r.reshape(-1, 1)).reshape(n) * (1.0 / tau)
    lse = _logsumexp_rows(logits)
    return lse - logits.rows(positive_index, positive_index + 1).sum()


def cip_loss_batch(f_r: Tensor, f_l: Tensor, tau: float = 0.1) -> Tensor:
    """Batched InfoNCE with in-batch negatives; positives on the diagonal."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    f_r, f_l = _t(f_r), _t(f_l)
    n = f_r.data.shape[0]
    logits = f_r.matmul(f_l.t()) * (1.0 / tau)
    lse = _logsumexp_rows(logits)
    eye = np.eye(n, dtype=logits.data.dtype)
    pos = (logits * eye).sum(axis=1)
    return (lse - pos).mean()


def combined_loss(mip, cip, alpha: float):
    """Weighted sum of the two branch losses."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * mip + (1.0 - alpha) * cip
