"""Differentiable Poincaré-ball operations with learnable curvature.

All points live in the open ball of radius 1/sqrt(c) for curvature c > 0.
Operations act on the last axis of (..., d) tensors and are built from tape
primitives, so gradients (including through the curvature) come for free.

Closed forms used here, with sqrt_c = sqrt(c):

    exp0(v)   = tanh(sqrt_c |v|) * v / (sqrt_c |v|)
    log0(y)   = atanh(sqrt_c |y|) * y / (sqrt_c |y|)      (exact inverse)
    x (+) y   = ((1 + 2c<x,y> + c|y|^2) x + (1 - c|x|^2) y)
                / (1 + 2c<x,y> + c^2 |x|^2 |y|^2)
    r (x) x   = tanh(r atanh(sqrt_c |x|)) * x / (sqrt_c |x|)

with the conventions exp0(0) = 0, log0(0) = 0 and r (x) 0 = 0. Every result
is projected back inside the ball (norm <= (1 - BALL_EPS)/sqrt_c); atanh
arguments are clamped below 1 - BALL_EPS with a warning counter. Gradients
pass straight through unclamped values and are zero where clamping engaged.
"""

from __future__ import annotations

import math
import os
import threading

import numpy as np

from . import tape
from .errors import CodecParseError, NumericalError
from .tape import Tensor

BALL_EPS = 1e-5  # safety margin to the ball boundary
NORM_EPS = 1e-9  # below this, norms are treated as zero
MIN_CURVATURE = 1e-3  # softplus floor keeping the geometry non-degenerate
DENOM_EPS = 1e-12  # Möbius addition degeneracy threshold

_counters = threading.local()


def boundary_clamp_count() -> int:
    """Number of log-map calls (this thread) that hit the atanh clamp."""
    return getattr(_counters, "clamps", 0)


def reset_boundary_clamp_count() -> None:
    _counters.clamps = 0


def _note_clamp(n: int) -> None:
    _counters.clamps = getattr(_counters, "clamps", 0) + n


def _containment_checks_enabled() -> bool:
    return os.environ.get("HYDRA_NUM_CHECK") == "1"


class Curvature:
    """Learnable positive curvature, c = softplus(raw) + MIN_CURVATURE."""

    def __init__(self, raw: Tensor):
        self.raw = raw

    @classmethod
    def with_value(cls, c: float, requires_grad: bool = True) -> "Curvature":
        if c <= MIN_CURVATURE:
            raise CodecParseError(f"curvature must exceed {MIN_CURVATURE}, got {c}")
        raw = math.log(math.expm1(c - MIN_CURVATURE))
        return cls(Tensor(np.asarray(raw), requires_grad=requires_grad))

    def value(self) -> Tensor:
        return tape.softplus(self.raw) + MIN_CURVATURE


def _as_scalar(c) -> Tensor:
    if isinstance(c, Curvature):
        return c.value()
    if isinstance(c, Tensor):
        return c
    return Tensor(np.asarray(float(c)))


def _require_finite(t: Tensor, op: str) -> None:
    if not np.isfinite(t.data).all():
        raise CodecParseError(f"{op}: non-finite input")


def _curvature_data(c) -> np.ndarray:
    """Numeric curvature value without touching the tape."""
    if isinstance(c, Curvature):
        return np.logaddexp(0.0, c.raw.data) + MIN_CURVATURE
    if isinstance(c, Tensor):
        return c.data
    return np.asarray(float(c))


def ball_project(x: Tensor, c) -> Tensor:
    """Rescale rows with sqrt(c)|x| > 1 - BALL_EPS to lie just inside the
    ball; interior rows pass through untouched (and keep their gradient).
    The rescaling branch deliberately passes no gradient."""
    sqrt_c = np.sqrt(_curvature_data(c))
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    limit = (1.0 - BALL_EPS) / sqrt_c
    over = norm > limit
    if not over.any():
        return x
    scale = np.where(over, limit / np.maximum(norm, NORM_EPS), 1.0)
    out = x.data * scale
    keep = (~over).astype(np.float64)

    def vjp(g):
        return (g * keep,)

    return tape.defop(out, (x,), vjp, "ball_project")


def _assert_contained(out: Tensor, c_data: np.ndarray, op: str) -> None:
    norm = np.sqrt((out.data * out.data).sum(axis=-1))
    bound = (1.0 - BALL_EPS) / np.sqrt(c_data) * (1.0 + 1e-12) + 1e-15
    if (norm > bound).any():
        raise NumericalError(f"{op}: point escaped the ball (HYDRA_NUM_CHECK)")


def exp_map0(v: Tensor, c) -> Tensor:
    """Map a tangent vector at the origin onto the ball; exp0(0) = 0."""
    _require_finite(v, "exp_map0")
    c_t = _as_scalar(c)
    sqrt_c = tape.sqrt(c_t)
    norm = tape.clamp(tape.l2_norm(v), lo=NORM_EPS)
    arg = sqrt_c * norm
    out = ball_project(tape.tanh(arg) / arg * v, c_t)
    if _containment_checks_enabled():
        _assert_contained(out, c_t.data, "exp_map0")
    return out


def log_map0(y: Tensor, c) -> Tensor:
    """Map a ball point back to the tangent space at the origin; the exact
    inverse of exp_map0. Arguments on or past the boundary are clamped to
    1 - BALL_EPS and counted."""
    _require_finite(y, "log_map0")
    c_t = _as_scalar(c)
    sqrt_c = tape.sqrt(c_t)
    norm = tape.clamp(tape.l2_norm(y), lo=NORM_EPS)
    arg = sqrt_c * norm
    n_clamped = int((arg.data > 1.0 - BALL_EPS).sum())
    if n_clamped:
        _note_clamp(n_clamped)
    safe = tape.clamp(arg, hi=1.0 - BALL_EPS)
    return tape.atanh(safe) / arg * y


def mobius_add(x: Tensor, y: Tensor, c) -> Tensor:
    """Möbius addition of same-curvature ball points."""
    _require_finite(x, "mobius_add")
    _require_finite(y, "mobius_add")
    c_t = _as_scalar(c)
    x2 = tape.tsum(x * x, axis=-1, keepdims=True)
    y2 = tape.tsum(y * y, axis=-1, keepdims=True)
    xy = tape.tsum(x * y, axis=-1, keepdims=True)
    two_c_xy = 2.0 * c_t * xy
    num = (1.0 + two_c_xy + c_t * y2) * x + (1.0 - c_t * x2) * y
    den = 1.0 + two_c_xy + c_t * c_t * x2 * y2
    if (np.abs(den.data) < DENOM_EPS).any():
        raise NumericalError("mobius_add: degenerate denominator")
    out = ball_project(num / den, c_t)
    if _containment_checks_enabled():
        _assert_contained(out, c_t.data, "mobius_add")
    return out


def mobius_scalar(r, x: Tensor, c) -> Tensor:
    """Möbius scalar multiplication r (x) x; exactly 0 for r = 0 or x = 0."""
    _require_finite(x, "mobius_scalar")
    c_t = _as_scalar(c)
    r_t = r if isinstance(r, Tensor) else Tensor(np.asarray(float(r)))
    sqrt_c = tape.sqrt(c_t)
    norm = tape.clamp(tape.l2_norm(x), lo=NORM_EPS)
    arg = tape.clamp(sqrt_c * norm, hi=1.0 - BALL_EPS)
    out = ball_project(tape.tanh(r_t * tape.atanh(arg)) / (sqrt_c * norm) * x, c_t)
    if _containment_checks_enabled():
        _assert_contained(out, c_t.data, "mobius_scalar")
    return out


def transport(x: Tensor, c_from, c_to) -> Tensor:
    """Move a point between balls of different curvature through the shared
    tangent space at the origin. Identity when both curvatures are the same
    object."""
    if c_from is c_to:
        return x
    return exp_map0(log_map0(x, c_from), c_to)
