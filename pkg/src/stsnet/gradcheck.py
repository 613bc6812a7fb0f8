"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError


def grad_check(
    loss_fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic grads and central differences.

    loss_fn is a zero-argument callable evaluating the scalar loss; it must
    read the given arrays, which are perturbed in place (and restored).
    Arrays should be double precision. When `sample` is set, at most that
    many coordinates per array are checked, chosen by a seeded generator;
    otherwise every coordinate is.

    Relative error per coordinate:
        |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        if arr.shape != grad.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match array {arr.shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericError("analytic gradient contains non-finite values")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        else:
            idx = np.arange(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn()
            flat[i] = orig - eps
            f_minus = loss_fn()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"loss is non-finite near coordinate {i}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
