import numpy as np
import pytest

from codecparse import tape
from codecparse.tape import Tape, Tensor


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(build_loss, arrays: dict[str, np.ndarray], h: float = 1e-5,
              tol: float = 1e-4, max_exhaustive: int = 600, subsample: int = 256,
              rng_seed: int = 0, dir_h: float | None = None,
              floor: float = 1e-6) -> float:
    """Compare tape gradients of `build_loss(tensors) -> scalar Tensor`
    against central differences.

    Tensors with more than `max_exhaustive` entries are checked on a seeded
    coordinate subsample plus a random-direction directional derivative that
    covers the full gradient vector.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    with Tape() as t:
        loss = build_loss(tensors)
        t.backward(loss)
    analytic = {k: tensors[k].grad.copy() if tensors[k].grad is not None
                else np.zeros_like(v) for k, v in arrays.items()}

    def eval_at(updated: dict[str, np.ndarray]) -> float:
        ts = {k: Tensor(v) for k, v in updated.items()}
        return float(build_loss(ts).data)

    rng = np.random.default_rng(rng_seed)
    dh = dir_h if dir_h is not None else h
    worst = 0.0
    work = {k: v.copy() for k, v in arrays.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        n = flat.size
        if n <= max_exhaustive:
            coords = range(n)
        else:
            coords = rng.choice(n, size=subsample, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_at(work)
            flat[i] = orig - h
            fm = eval_at(work)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            an = analytic[name].reshape(-1)[i]
            worst = max(worst, rel_err(np.asarray(an), np.asarray(fd), floor=floor))
        if n > max_exhaustive:
            # directional probe covering every coordinate at once
            u = rng.standard_normal(n)
            u /= np.linalg.norm(u)
            saved = flat.copy()
            flat[:] = saved + dh * u
            fp = eval_at(work)
            flat[:] = saved - dh * u
            fm = eval_at(work)
            flat[:] = saved
            fd = (fp - fm) / (2.0 * dh)
            an = float(analytic[name].reshape(-1) @ u)
            worst = max(worst, rel_err(np.asarray(an), np.asarray(fd), floor=max(floor, 1e-5)))
    assert worst <= tol, f"gradient mismatch: max rel err {worst:.3e} > {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
