"""Training objective: per-task MSE plus a cross-correlation penalty that
pushes the per-task tangent latents toward pairwise statistical independence.

The penalty is the mean squared entry of the pairwise correlation matrices:
for each unordered latent pair (i, j), batch-center both, form the
cross-covariance C_ij = u_i^T u_j / (B - 1), normalize by the per-dimension
standard deviations (floored at 1e-6), and accumulate ||R_ij||_F^2 / d^2.
Zero cross-correlation is necessary for independence, and under a Gaussian
surrogate sufficient, so this is a differentiable stand-in for penalizing
the mutual information between the latents directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import UsageError
from .tape import Tensor

SIGMA_FLOOR = 1e-6
DEFAULT_HTC_WEIGHT = 0.1
TASKS = ("sr", "bps", "q")


@dataclass
class LossBreakdown:
    """Scalar loss components in normalized-label space."""

    mse_sr: float
    mse_bps: float
    mse_q: float
    htc: float
    total: float

    def as_dict(self) -> dict:
        return {
            "mse_sr": self.mse_sr,
            "mse_bps": self.mse_bps,
            "mse_q": self.mse_q,
            "htc": self.htc,
            "total": self.total,
        }


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over a batch of equal length >= 1."""
    if pred.data.shape != target.data.shape:
        raise UsageError(f"mse: shape mismatch {pred.data.shape} vs {target.data.shape}")
    if pred.data.size == 0:
        raise UsageError("mse: empty batch")
    diff = pred - target
    return tape.tmean(diff * diff)


def htc_loss(latents: list[Tensor]) -> Tensor:
    """Mean squared pairwise correlation across K tangent batches (B, d)."""
    if len(latents) < 2:
        raise UsageError("htc_loss: need at least two latents")
    B = latents[0].data.shape[0]
    if B < 2:
        raise UsageError(f"htc_loss: need batch size >= 2, got {B}")
    d = latents[0].data.shape[1]

    centered = []
    sigmas = []
    for u in latents:
        if u.data.shape != (B, d):
            raise UsageError(f"htc_loss: inconsistent latent shape {u.data.shape}")
        uc = u - tape.tmean(u, axis=0, keepdims=True)
        var = tape.tsum(uc * uc, axis=0, keepdims=True) / float(B - 1)
        sigma = tape.sqrt(tape.clamp(var, lo=SIGMA_FLOOR * SIGMA_FLOOR))
        centered.append(uc)
        sigmas.append(sigma)

    total = Tensor(np.asarray(0.0))
    k = len(latents)
    for i in range(k):
        for j in range(i + 1, k):
            cov = tape.transpose(centered[i]) @ centered[j] / float(B - 1)
            corr = cov / tape.transpose(sigmas[i]) / sigmas[j]
            total = total + tape.tsum(corr * corr) / float(d * d)
    return total


def total_loss(preds, targets, latents, htc_weight: float = DEFAULT_HTC_WEIGHT):
    """Combine per-task MSEs and the latent penalty.

    preds/targets: 3-tuples of (B,) tensors ordered (sr, bps, q). latents is
    None for models without per-task subspaces; the penalty term is then
    omitted entirely. Returns (total scalar Tensor, LossBreakdown floats).
    """
    parts = [mse(p, t) for p, t in zip(preds, targets)]
    total = parts[0] + parts[1] + parts[2]
    htc_val = 0.0
    if latents is not None and htc_weight != 0.0:
        penalty = htc_loss(latents)
        htc_val = float(penalty.data)
        total = total + htc_weight * penalty
    breakdown = LossBreakdown(
        mse_sr=float(parts[0].data),
        mse_bps=float(parts[1].data),
        mse_q=float(parts[2].data),
        htc=htc_val,
        total=float(total.data),
    )
    return total, breakdown
