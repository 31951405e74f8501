"""Shared test utilities: finite differences and bit-level comparison."""

from __future__ import annotations

import numpy as np

from memvit import tensor as T


def central_diff(f, param: T.Tensor, coords, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. flat coords of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(len(coords), dtype=np.float64)
    for n, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + h
        up = float(f())
        flat[i] = keep - h
        down = float(f())
        flat[i] = keep
        out[n] = (up - down) / (2.0 * h)
    return out


def check_grads_fd(build_loss, params: dict[str, T.Tensor], rng: np.random.Generator,
                   coords_per_tensor: int = 20, h: float = 1e-5,
                   rel_tol: float = 1e-4) -> float:
    """Compare backward() grads against central differences on sampled coords.

    ``build_loss`` must run a fresh forward and return the scalar loss
    tensor; it is called once under a tape for the analytic gradients and
    repeatedly (untaped) for the numeric ones. Returns the max relative
    error seen. All params should be float64 leaves.
    """
    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        loss = build_loss()
    T.backward(tape, loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        n = p.data.size
        k = min(coords_per_tensor, n)
        coords = rng.choice(n, size=k, replace=False)
        num = central_diff(lambda: build_loss().data, p, coords, h=h)
        ana = analytic[name].reshape(-1)[coords]
        denom = np.maximum(np.abs(num), np.maximum(np.abs(ana), 1e-8))
        rel = np.abs(num - ana) / denom
        worst = max(worst, float(rel.max()))
        assert rel.max() < rel_tol, (
            f"gradient mismatch in {name}: rel err {rel.max():.3e} "
            f"(analytic {ana[rel.argmax()]:.6e} vs numeric {num[rel.argmax()]:.6e})"
        )
    return worst


def bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two float arrays are bitwise identical."""
    if a.shape != b.shape or a.dtype != b.dtype:
        return False
    ac = np.ascontiguousarray(a)
    bc = np.ascontiguousarray(b)
    return ac.tobytes() == bc.tobytes()
