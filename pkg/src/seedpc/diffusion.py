"""Discrete diffusion machinery: noise schedules, posterior steps, sampling.

Schedules are short heads (default T = 8) of a longer base schedule, so the
per-step noise matches the opening steps of the full process.  The core
identities, with alpha_bar(0) = 1:

    add_noise:      x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
    posterior_mean: (x_t - (1 - a_t)/sqrt(1 - ab_t) eps_hat) / sqrt(a_t)
    predict_x0:     (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)
    sigma_t:        sqrt(b_t (1 - ab_{t-1}) / (1 - ab_t))   (sigma_1 = 0)

These ops accept plain arrays or TracedValue operands, so the same formulas
serve evaluation and gradient traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import TracedValue, gather
from .errors import InvalidArgument
from .patching import POINTS_PER_ROUND

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "add_noise",
    "posterior_mean",
    "predict_x0",
    "ConditionalDenoiser",
    "OracleDenoiser",
    "SeedAnchorDenoiser",
    "rounds_for",
    "sample_patch",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by step t in 1..T (stored 0-based)."""

    kind: str
    T: int
    base_steps: int
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise InvalidArgument(f"betas must have shape ({self.T},)")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise InvalidArgument("betas must lie strictly inside (0, 1)")
        betas = betas.copy()
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        bars = np.cumprod(1.0 - betas)
        bars.setflags(write=False)
        object.__setattr__(self, "_bars", bars)

    def _check_t(self, t: int, low: int = 1) -> int:
        t = int(t)
        if not low <= t <= self.T:
            raise InvalidArgument(f"step must be in [{low}, {self.T}], got {t}")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas; alpha_bar(0) is 1 by convention."""
        t = self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self._bars[t - 1])

    def sigma(self, t: int) -> float:
        """Posterior noise scale; exactly 0 at t = 1."""
        t = self._check_t(t)
        num = self.beta(t) * (1.0 - self.alpha_bar(t - 1))
        return math.sqrt(num / (1.0 - self.alpha_bar(t)))


def make_schedule(
    T: int = 8,
    kind: str = "cosine",
    base_steps: int = 1024,
    beta: float | None = None,
) -> NoiseSchedule:
    """Build a schedule of T steps.

    "cosine": first T betas of a squared-cosine alpha_bar schedule over
    ``base_steps`` steps (offset 0.008, betas clamped to 0.999).
    "linear": first T of betas linearly spaced 1e-4..0.02 over ``base_steps``.
    "constant": every beta equal to ``beta`` (for closed-form tests).
    """
    if T < 1:
        raise InvalidArgument(f"T must be >= 1, got {T}")
    if kind == "constant":
        if beta is None:
            raise InvalidArgument("constant schedule needs beta")
        return NoiseSchedule(kind, T, T, np.full(T, float(beta)))
    if base_steps < T:
        raise InvalidArgument(f"base_steps {base_steps} < T {T}")
    if kind == "cosine":
        s = 0.008
        steps = np.arange(base_steps + 1, dtype=np.float64)
        f = np.cos((steps / base_steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        bars = f / f[0]
        betas = 1.0 - bars[1:] / bars[:-1]
        betas = np.clip(betas, 0.0, 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, base_steps)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind, T, base_steps, betas[:T])


# ---------------------------------------------------------------------------
# Core identities (generic over ndarray / TracedValue operands)
# ---------------------------------------------------------------------------


def add_noise(x0, t: int, eps, sched: NoiseSchedule):
    """Noise x0 to step t; t = 0 returns x0 itself."""
    ab = sched.alpha_bar(t)
    if t == 0:
        return x0
    return x0 * math.sqrt(ab) + eps * math.sqrt(1.0 - ab)


def posterior_mean(x_t, eps_hat, t: int, sched: NoiseSchedule):
    """Mean of the reverse-step posterior given a noise estimate."""
    a = sched.alpha(t)
    coef = (1.0 - a) / math.sqrt(1.0 - sched.alpha_bar(t))
    return (x_t - eps_hat * coef) * (1.0 / math.sqrt(a))


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule):
    """Invert add_noise for a noise estimate at step t."""
    ab = sched.alpha_bar(t)
    if not 1 <= int(t) <= sched.T:
        raise InvalidArgument(f"step must be in [1, {sched.T}], got {t}")
    return (x_t - eps_hat * math.sqrt(1.0 - ab)) * (1.0 / math.sqrt(ab))


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------


class ConditionalDenoiser:
    """Noise estimator eps(x_t, cond, t) conditioned on seed rows.

    ``eps`` must be pure: identical inputs give identical outputs.
    ``eps_traced`` runs the estimate inside an autodiff trace so scalar
    losses can differentiate with respect to ``cond``; the default treats
    the output as constant (no conditioning gradient).
    """

    def eps(self, x_t: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def eps_traced(self, x_t: np.ndarray, cond: TracedValue, t: int) -> TracedValue:
        return cond.tape.constant(self.eps(x_t, cond.value, t))


def _nearest_rows(rows: np.ndarray, queries: np.ndarray, tree: cKDTree | None = None):
    tree = tree if tree is not None else cKDTree(rows)
    _, idx = tree.query(queries)
    return idx


class OracleDenoiser(ConditionalDenoiser):
    """Analytic noise estimate from a known target row set (ignores cond).

    eps = (x_t - sqrt(ab_t) * nearest_target_rows(x_t)) / sqrt(1 - ab_t).
    Useful as a perfect-prior stand-in when the original patch is at hand.
    """

    def __init__(self, target_rows: np.ndarray, sched: NoiseSchedule):
        rows = np.asarray(target_rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise InvalidArgument("target rows must be a non-empty 2-D array")
        self.target = rows.copy()
        self.sched = sched
        self._tree = cKDTree(self.target)

    def eps(self, x_t, cond, t):
        ab = self.sched.alpha_bar(t)
        anchor = self.target[_nearest_rows(self.target, x_t, self._tree)]
        return (x_t - math.sqrt(ab) * anchor) / math.sqrt(1.0 - ab)


class SeedAnchorDenoiser(ConditionalDenoiser):
    """Oracle formula applied to the conditioning rows themselves.

    Anchors each noisy row to its nearest cond row, so gradients flow into
    cond through the anchored coordinates (selection indexes stay frozen).
    The differentiable analytic baseline for tuning.
    """

    def __init__(self, sched: NoiseSchedule):
        self.sched = sched

    def eps(self, x_t, cond, t):
        cond = np.asarray(cond, dtype=np.float64)
        ab = self.sched.alpha_bar(t)
        anchor = cond[_nearest_rows(cond, x_t)]
        return (x_t - math.sqrt(ab) * anchor) / math.sqrt(1.0 - ab)

    def eps_traced(self, x_t, cond, t):
        ab = self.sched.alpha_bar(t)
        idx = _nearest_rows(cond.value, x_t)
        anchor = gather(cond, idx)
        return (x_t - anchor * math.sqrt(ab)) * (1.0 / math.sqrt(1.0 - ab))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def rounds_for(num_points: int) -> int:
    """Sampling rounds for a patch's original point count (round half up)."""
    if num_points < 1:
        raise InvalidArgument(f"point count must be >= 1, got {num_points}")
    return max(1, int(math.floor(num_points / POINTS_PER_ROUND + 0.5)))


def sample_patch(
    denoiser: ConditionalDenoiser,
    seeds: np.ndarray,
    num_points: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Reconstruct a patch from seed rows.

    Runs rounds_for(num_points) independent reverse passes of 3072 rows
    each, started from the noised seed set, and concatenates them.  Each
    round draws from its own rng split, so results do not depend on
    execution order.  Output colors are clamped to [0, 1].
    """
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.ndim != 2 or seeds.shape[1] != 6 or seeds.shape[0] < 1:
        raise InvalidArgument("seeds must be a non-empty (K, 6) array")
    n_rounds = rounds_for(num_points)
    out = np.empty((n_rounds * POINTS_PER_ROUND, 6))
    for r, sub in enumerate(rng.spawn(n_rounds)):
        if seeds.shape[0] == POINTS_PER_ROUND:
            base = seeds
        else:
            base = seeds[sub.integers(0, seeds.shape[0], size=POINTS_PER_ROUND)]
        x = add_noise(base, sched.T, sub.standard_normal(base.shape), sched)
        for t in range(sched.T, 0, -1):
            x = posterior_mean(x, denoiser.eps(x, seeds, t), t, sched)
            if t > 1:
                x = x + sched.sigma(t) * sub.standard_normal(x.shape)
        out[r * POINTS_PER_ROUND : (r + 1) * POINTS_PER_ROUND] = x
    out[:, 3:] = np.clip(out[:, 3:], 0.0, 1.0)
    return out
