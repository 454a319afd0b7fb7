from __future__ import annotations

import numpy as np


def steps_between(span: float, dt: float, what: str = "t_max") -> int:
    """Number of ``dt`` steps covering ``span``; ``span`` must be a multiple of ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if span < 0:
        raise ValueError(f"{what} must be nonnegative")
    n = int(round(span / dt))
    if abs(n * dt - span) > 1e-9 * max(1.0, span):
        raise ValueError(f"{what}={span!r} is not an integer multiple of dt={dt!r}")
    return n


def sample_grid(t_max: float, dt: float, sample_dt: float | None) -> tuple[int, int, np.ndarray]:
    """``(n_steps, stride, sample_times)`` for a fixed-step run.

    Samples are taken every ``stride`` integration steps starting at t = 0.
    """
    n_steps = steps_between(t_max, dt)
    stride = 1 if sample_dt is None else steps_between(sample_dt, dt, "sample_dt")
    if stride < 1:
        raise ValueError("sample_dt must be at least dt")
    idx = np.arange(0, n_steps + 1, stride)
    return n_steps, stride, idx * dt
