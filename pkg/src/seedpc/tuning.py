"""Seed selection and weight tuning.

Seeds are sparse 6-D rows summarizing a patch.  Each seed is a normalized
absolute-weight combination of a fixed neighbor set from its patch, so the
only free parameters are the weights.  Tuning runs short noising/denoising
probes against random patch samples and follows the gradient of a
set-distance (or noise-matching) loss into the weights; rows selected near
patch faces stay frozen so neighboring patches keep meeting at their
interfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tape, TracedValue
from .diffusion import (
    ConditionalDenoiser,
    NoiseSchedule,
    add_noise,
    make_schedule,
    posterior_mean,
    predict_x0,
)
from .errors import DegenerateWeights, EmptyPatch, InvalidArgument, TrainingDiverged
from .patching import PatchGrid
from .pointset import ColoredPointCloud, random_sample
from .spatial import KdIndex, ball_query, farthest_point_sample

__all__ = [
    "SeedWeights",
    "TuneConfig",
    "TuneResult",
    "AdamState",
    "bdsam",
    "init_weights",
    "aggregate",
    "loss_cd",
    "loss_dm",
    "loss_cdm",
    "loss_inver",
    "adam_step",
    "tune",
]

_EPS_WEIGHT = 1e-4  # off-diagonal init weight: approximately one-hot


# ---------------------------------------------------------------------------
# Seed selection
# ---------------------------------------------------------------------------


def bdsam(patch: ColoredPointCloud, m: int, cell_edge: float = 2.0):
    """Boundary-first seed row selection.

    Rows within 0.02 * cell_edge of any face of the patch's bounding box
    form the boundary set (farthest-point-thinned to at most m//4); the
    remainder fills by farthest point sampling seeded from the boundary.
    Patches with <= m points return every row.

    Returns (row indexes, boundary mask) aligned with each other.
    """
    if m < 1:
        raise InvalidArgument(f"m must be >= 1, got {m}")
    n = len(patch)
    pos = patch.positions
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    delta = 0.02 * cell_edge
    near_face = ((pos - lo) <= delta) | ((hi - pos) <= delta)
    boundary_rows = np.flatnonzero(near_face.any(axis=1))

    if n <= m:
        idx = np.arange(n, dtype=np.int64)
        mask = np.zeros(n, dtype=bool)
        mask[boundary_rows] = True
        return idx, mask

    cap = max(1, m // 4)
    if boundary_rows.size > cap:
        local = farthest_point_sample(pos[boundary_rows], cap, 0)
        boundary_rows = boundary_rows[local]
    if boundary_rows.size == 0:
        selected = farthest_point_sample(pos, m, 0)
        mask = np.zeros(m, dtype=bool)
        return selected, mask
    selected = farthest_point_sample(pos, m, boundary_rows)
    mask = np.zeros(m, dtype=bool)
    mask[: boundary_rows.size] = True
    return selected, mask


def init_weights(patch: ColoredPointCloud, seed_rows: np.ndarray, k: int = 32, radius: float = 0.004):
    """Neighbor sets and approximately one-hot start weights for each seed.

    Neighbors come from a ball query around the seed's own position; the
    seed's own row gets weight 1 and every other slot 1e-4, so the initial
    aggregate sits essentially on the seed row itself.

    Returns (neighbor indexes (m, k), weights (m, k)).
    """
    seed_rows = np.asarray(seed_rows, dtype=np.int64)
    index = KdIndex(patch.positions)
    m = seed_rows.shape[0]
    nbr = np.empty((m, k), dtype=np.int64)
    for i, s in enumerate(seed_rows):
        nbr[i], _ = ball_query(index, patch.positions[s], radius, k)
    weights = np.full((m, k), _EPS_WEIGHT)
    # Ball-query padding can repeat the seed's own row; exactly one slot
    # (the first) carries the 1.0 so each row stays approximately one-hot.
    own = nbr == seed_rows[:, None]
    has_own = own.any(axis=1)
    first = own.argmax(axis=1)
    weights[np.flatnonzero(has_own), first[has_own]] = 1.0
    weights[~has_own, 0] = 1.0
    return nbr, weights


@dataclass
class SeedWeights:
    """Tunable state of one patch's seeds."""

    seed_rows: np.ndarray  # (m,) rows of the patch picked by bdsam
    neighbor_idx: np.ndarray  # (m, k) patch rows feeding each seed
    weights: np.ndarray  # (m, k) free parameters
    frozen: np.ndarray  # (m,) True for boundary seeds


def aggregate(patch_rows: np.ndarray, neighbor_idx: np.ndarray, weights):
    """Seeds as |w|-normalized combinations of their neighbor rows.

    ``weights`` may be a plain array (returns an array) or a TracedValue
    (returns a TracedValue whose gradient reaches the weights).  Raises
    DegenerateWeights when a row's absolute weights sum to zero.
    """
    patch_rows = np.asarray(patch_rows, dtype=np.float64)
    neighbor_idx = np.asarray(neighbor_idx, dtype=np.int64)
    traced = isinstance(weights, TracedValue)
    w_val = weights.value if traced else np.asarray(weights, dtype=np.float64)
    if w_val.shape != neighbor_idx.shape:
        raise InvalidArgument("weights and neighbor_idx shapes differ")
    if np.any(np.abs(w_val).sum(axis=1) <= 0.0):
        raise DegenerateWeights("a seed's absolute weights sum to zero")
    gathered = patch_rows[neighbor_idx]  # (m, k, 6)
    if not traced:
        wa = np.abs(w_val)
        wn = wa / wa.sum(axis=1, keepdims=True)
        return (wn[:, :, None] * gathered).sum(axis=1)
    wa = ad.absolute(weights)
    wn = ad.div(wa, ad.vsum(wa, axis=1, keepdims=True))
    m, k = w_val.shape
    contrib = ad.mul(ad.reshape(wn, (m, k, 1)), gathered)
    return ad.vsum(contrib, axis=1)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _is_traced(x) -> bool:
    return isinstance(x, TracedValue)


def _row_norms(diff):
    """Euclidean row norms, traced or plain."""
    if _is_traced(diff):
        return ad.sqrt(ad.vsum(ad.mul(diff, diff), axis=-1))
    return np.sqrt((diff * diff).sum(axis=-1))


def _mean(x):
    if _is_traced(x):
        return ad.div(ad.vsum(x), float(x.value.size))
    return float(np.mean(x))


def loss_cd(a, b):
    """Symmetric Chamfer distance over row sets (unsquared distances).

    0.5 * (mean_i min_j |a_i - b_j| + mean_j min_i |b_j - a_i|).  Either
    side may be traced; nearest-pair selection is frozen during backward,
    gradients flow through the matched coordinates.
    """
    a_val = a.value if _is_traced(a) else np.asarray(a, dtype=np.float64)
    b_val = b.value if _is_traced(b) else np.asarray(b, dtype=np.float64)
    if a_val.ndim != 2 or b_val.ndim != 2 or a_val.shape[1] != b_val.shape[1]:
        raise InvalidArgument("loss_cd needs two (N, d) arrays with matching d")
    if a_val.shape[0] < 1 or b_val.shape[0] < 1:
        raise EmptyPatch("loss_cd needs non-empty sets")
    if not (np.all(np.isfinite(a_val)) and np.all(np.isfinite(b_val))):
        raise TrainingDiverged("non-finite coordinates in set-distance operands")
    tree_a = cKDTree(a_val)
    tree_b = cKDTree(b_val)
    if not _is_traced(a) and not _is_traced(b):
        d_ab, _ = tree_b.query(a_val)
        d_ba, _ = tree_a.query(b_val)
        return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    _, i_ab = tree_b.query(a_val)  # nearest b row for each a row
    _, i_ba = tree_a.query(b_val)
    b_match = ad.gather(b, i_ab) if _is_traced(b) else b_val[i_ab]
    a_match = ad.gather(a, i_ba) if _is_traced(a) else a_val[i_ba]
    diff_a = (a - b_match) if _is_traced(a) else (b_match - a_val)
    diff_b = (b - a_match) if _is_traced(b) else (a_match - b_val)
    return (_mean(_row_norms(diff_a)) + _mean(_row_norms(diff_b))) * 0.5


def _eps_hat(denoiser: ConditionalDenoiser, x_t: np.ndarray, seeds, t: int):
    if _is_traced(seeds):
        return denoiser.eps_traced(x_t, seeds, t)
    return denoiser.eps(x_t, np.asarray(seeds, dtype=np.float64), t)


def _mse(pred, target: np.ndarray):
    diff = pred - target if _is_traced(pred) else np.asarray(pred) - target
    if _is_traced(diff):
        return _mean(ad.mul(diff, diff))
    return float(np.mean(diff * diff))


def _check_probe(x0_sample: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0_sample, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[1] != 6:
        raise InvalidArgument("x0 sample must be (N, 6) rows")
    if not 1 <= int(t) <= sched.T:
        raise InvalidArgument(f"t must be in [1, {sched.T}], got {t}")
    return x0


def loss_dm(x0_sample, seeds, t, eps, denoiser, sched):
    """Noise-matching loss: mean squared error between eps and its estimate."""
    x0 = _check_probe(x0_sample, t, sched)
    x_t = add_noise(x0, t, np.asarray(eps), sched)
    return _mse(_eps_hat(denoiser, x_t, seeds, t), np.asarray(eps, dtype=np.float64))


def loss_cdm(x0_sample, seeds, t, eps, denoiser, sched):
    """Set distance between the true and estimated previous-step points.

    Compares x_{t-1} (noised from x0 with the same eps draw, alpha_bar(0)=1
    at t=1) against the posterior mean computed from the noise estimate.
    Order of rows on either side does not matter.
    """
    x0 = _check_probe(x0_sample, t, sched)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = add_noise(x0, t, eps, sched)
    x_prev = add_noise(x0, t - 1, eps, sched)
    x_bar = posterior_mean(x_t, _eps_hat(denoiser, x_t, seeds, t), t, sched)
    return loss_cd(x_prev, x_bar)


def loss_inver(x0_sample, seeds, t, eps, denoiser, sched):
    """Set distance between x0 and its one-shot reconstruction from step t."""
    x0 = _check_probe(x0_sample, t, sched)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = add_noise(x0, t, eps, sched)
    x0_bar = predict_x0(x_t, _eps_hat(denoiser, x_t, seeds, t), t, sched)
    return loss_cd(x0, x0_bar)


_LOSSES = {"dm": loss_dm, "cdm": loss_cdm, "inver": loss_inver}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam over one parameter array; frozen rows never move."""

    params: np.ndarray
    frozen: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)


def adam_step(state: AdamState, grads: np.ndarray, lr: float) -> AdamState:
    """One in-place Adam update; returns the state for chaining."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != state.params.shape:
        raise InvalidArgument("gradient shape mismatch")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.frozen is not None:
        update[state.frozen] = 0.0
    state.params -= update
    return state


# ---------------------------------------------------------------------------
# Tuning loop
# ---------------------------------------------------------------------------


@dataclass
class TuneConfig:
    iterations: int = 1000
    lr: float = 5e-5
    loss: str = "cdm"
    seeds_per_patch: int = 1024
    neighbors: int = 32
    radius: float = 0.004
    sample_size: int = 3072
    seed: int = 0
    sched: NoiseSchedule | None = None


@dataclass
class TuneResult:
    seeds: np.ndarray  # (sum m_i, 6) aggregated seeds, patches in canonical order
    per_patch: list[SeedWeights]
    seed_counts: np.ndarray  # (n_patches,) seeds per patch
    log: list[tuple]  # (iteration, patch, t, loss)


def tune(
    patches: list[ColoredPointCloud],
    grid: PatchGrid,
    denoiser: ConditionalDenoiser,
    config: TuneConfig,
) -> TuneResult:
    """Tune seed weights across patches (one random patch per iteration).

    Each iteration draws a patch, a step t, a fresh 3072-row sample of the
    patch and a fresh noise draw, evaluates the configured loss on that
    patch's aggregated seeds, and applies one Adam step to all non-frozen
    weight rows.  Returns the final aggregated seeds in canonical patch
    order plus the iteration log.
    """
    if not patches:
        raise EmptyPatch("no patches to tune")
    if config.loss not in _LOSSES:
        raise InvalidArgument(f"unknown loss {config.loss!r}; pick one of {sorted(_LOSSES)}")
    loss_fn = _LOSSES[config.loss]
    sched = config.sched if config.sched is not None else make_schedule()
    rng = np.random.default_rng(config.seed)

    states: list[SeedWeights] = []
    for patch in patches:
        rows, boundary = bdsam(patch, config.seeds_per_patch, grid.cell_edge)
        nbr, w0 = init_weights(patch, rows, config.neighbors, config.radius)
        states.append(SeedWeights(rows, nbr, w0, boundary))

    counts = np.array([s.weights.shape[0] for s in states], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    stacked = np.concatenate([s.weights for s in states], axis=0)
    frozen = np.concatenate([s.frozen for s in states])
    adam = AdamState(stacked, frozen=frozen)
    patch_rows = [p.as_rows() for p in patches]

    log: list[tuple] = []
    for it in range(1, config.iterations + 1):
        p = int(rng.integers(0, len(patches)))
        t = int(rng.integers(1, sched.T + 1))
        x0 = random_sample(patches[p], config.sample_size, rng).as_rows()
        eps = rng.standard_normal(x0.shape)

        lo, hi = offsets[p], offsets[p + 1]
        tape = Tape()
        w_p = tape.input(adam.params[lo:hi])
        seeds_p = aggregate(patch_rows[p], states[p].neighbor_idx, w_p)
        try:
            loss = loss_fn(x0, seeds_p, t, eps, denoiser, sched)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from None
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite tuning loss at iteration {it}")
        tape.backward(loss)
        g = np.zeros_like(adam.params)
        g[lo:hi] = w_p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient at iteration {it}")
        adam_step(adam, g, config.lr)
        log.append((it, p, t, value))

    for s, lo, hi in zip(states, offsets[:-1], offsets[1:]):
        s.weights = adam.params[lo:hi].copy()
    seeds = np.concatenate(
        [aggregate(rows, s.neighbor_idx, s.weights) for rows, s in zip(patch_rows, states)],
        axis=0,
    )
    return TuneResult(seeds, states, counts, log)
