"""Central finite-difference checks against ``backward``."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, get_dtype, no_grad


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: Optional[float] = None,
                      max_coords: int = 200, seed: int = 0, n_directions: int = 24) -> float:
    """Max over inputs of ``||g_fd - g_bw|| / max(||g_fd||, ||g_bw||)``.

    ``fn`` maps the input tensors to a scalar tensor. Inputs with at most
    ``max_coords`` entries are probed one coordinate at a time. Larger inputs
    are probed along ``n_directions`` seeded random sign vectors (every entry
    moves by ``h``), comparing the central difference with ``g . v``: a single
    coordinate of a mean over many pixels moves the loss by far less than its
    32-bit rounding step, whereas a sign vector moves it by about ``||g||``.
    """
    if h is None:
        h = 1e-6 if get_dtype() == np.float64 else 3e-3  # near the cube root of float32 epsilon
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [t.grad.astype(np.float64).reshape(-1) for t in inputs]

    def central(t, ana, step):
        # compare against the step the storage dtype can actually represent
        orig = t.data
        plus, minus = (orig + step).astype(orig.dtype), (orig - step).astype(orig.dtype)
        with no_grad():
            t.data = plus
            fp = float(fn(*inputs).data)
            t.data = minus
            fm = float(fn(*inputs).data)
        t.data = orig
        half = (plus.astype(np.float64) - minus.astype(np.float64)).reshape(-1) / 2.0
        return (fp - fm) / 2.0, float(ana @ half)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ana in zip(inputs, analytic):
        n = t.data.size
        if n <= max_coords:
            probes = np.eye(n)
        else:
            probes = rng.choice([-1.0, 1.0], size=(n_directions, n))
        num, a = np.array([central(t, ana, h * v.reshape(t.shape)) for v in probes]).T
        scale = max(np.linalg.norm(num), np.linalg.norm(a), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - a) / scale))
    return worst
