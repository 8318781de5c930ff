"""A small trainable conditional denoiser plus synthetic training shapes.

The network predicts the noise in a 6-D row set from the rows themselves,
a sinusoidal embedding of the timestep, and features interpolated from the
``m = 8`` nearest conditioning seeds (inverse-distance weights), so its
output stays differentiable with respect to both the parameters and the
seed rows.  It is deliberately tiny — a shared row encoder and a 3-layer
head, ~9k parameters at the default width — just enough structure for the
seed-tuning pipeline to have a learned prior to push against.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tape, TracedValue
from .diffusion import ConditionalDenoiser, NoiseSchedule, add_noise, make_schedule
from .errors import DecodeError, InvalidArgument, TrainingDiverged, UnsupportedStream
from .pointset import ColoredPointCloud
from .tuning import AdamState, adam_step

__all__ = [
    "NEIGHBORS",
    "ToyDenoiserParams",
    "ToyDenoiser",
    "ToyTrainConfig",
    "init_params",
    "forward",
    "synth_shapes",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

NEIGHBORS = 8
_MAX_PARAMS = 100_000
_ROW_DIM = 6
# Weighting floor keeps inverse-distance weights finite when a noisy row
# lands exactly on a seed.
_DIST_FLOOR = 1e-3

_MAGIC = b"SPTD"
_VERSION = 1


@dataclass(frozen=True)
class ToyDenoiserParams:
    """Weights of the toy denoiser; immutable once constructed."""

    enc_w: np.ndarray  # (6, h) shared row encoder, applied to x_t and seeds
    enc_b: np.ndarray  # (h,)
    head1_w: np.ndarray  # (h, h)
    head1_b: np.ndarray
    head2_w: np.ndarray  # (h, h)
    head2_b: np.ndarray
    out_w: np.ndarray  # (h, 6)
    out_b: np.ndarray  # (6,)

    def __post_init__(self):
        total = 0
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"parameter {f.name} contains NaN or Inf")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
            total += arr.size
        h = self.enc_w.shape[1] if self.enc_w.ndim == 2 else 0
        if self.enc_w.shape != (_ROW_DIM, h) or h < 1:
            raise InvalidArgument("enc_w must have shape (6, h)")
        expected = {
            "enc_b": (h,),
            "head1_w": (h, h),
            "head1_b": (h,),
            "head2_w": (h, h),
            "head2_b": (h,),
            "out_w": (h, _ROW_DIM),
            "out_b": (_ROW_DIM,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidArgument(f"{name} must have shape {shape}")
        if total >= _MAX_PARAMS:
            raise InvalidArgument(f"parameter count {total} exceeds budget {_MAX_PARAMS}")

    @property
    def hidden(self) -> int:
        return self.enc_w.shape[1]

    @property
    def n_params(self) -> int:
        return sum(np.asarray(getattr(self, f.name)).size for f in fields(self))


def _field_names() -> list[str]:
    return [f.name for f in fields(ToyDenoiserParams)]


def _pack(params: ToyDenoiserParams) -> np.ndarray:
    return np.concatenate([np.asarray(getattr(params, n)).ravel() for n in _field_names()])


def _unpack(flat: np.ndarray, template: ToyDenoiserParams) -> ToyDenoiserParams:
    out = {}
    pos = 0
    for n in _field_names():
        shape = np.asarray(getattr(template, n)).shape
        size = int(np.prod(shape)) if shape else 1
        out[n] = flat[pos : pos + size].reshape(shape)
        pos += size
    return ToyDenoiserParams(**out)


def init_params(rng: np.random.Generator, hidden: int = 64) -> ToyDenoiserParams:
    """Xavier-scaled normal weights, zero biases."""
    if hidden < 1:
        raise InvalidArgument(f"hidden width must be >= 1, got {hidden}")

    def draw(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))

    return ToyDenoiserParams(
        enc_w=draw(_ROW_DIM, hidden),
        enc_b=np.zeros(hidden),
        head1_w=draw(hidden, hidden),
        head1_b=np.zeros(hidden),
        head2_w=draw(hidden, hidden),
        head2_b=np.zeros(hidden),
        out_w=draw(hidden, _ROW_DIM),
        out_b=np.zeros(_ROW_DIM),
    )


# --- generic helpers so one forward serves numpy and traced execution ------


def _is_traced(x) -> bool:
    return isinstance(x, TracedValue)

def _val(x) -> np.ndarray:
    return x.value if _is_traced(x) else np.asarray(x, dtype=np.float64)

def _mm(a, b):
    return ad.matmul(a, b) if (_is_traced(a) or _is_traced(b)) else a @ b

def _tanh(x):
    return ad.tanh(x) if _is_traced(x) else np.tanh(x)

def _sqrt(x):
    return ad.sqrt(x) if _is_traced(x) else np.sqrt(x)

def _sum(x, axis, keepdims=False):
    if _is_traced(x):
        return ad.vsum(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)

def _take(x, idx):
    return ad.gather(x, idx) if _is_traced(x) else x[idx]

def _reshape(x, shape):
    return ad.reshape(x, shape) if _is_traced(x) else x.reshape(shape)


def _param(params, name):
    if isinstance(params, dict):
        return params[name]
    return getattr(params, name)


def forward(params, x_t, cond, t: int):
    """Predicted noise for M noisy rows given K conditioning seed rows.

    ``params`` is a ToyDenoiserParams or a dict mapping its field names to
    traced values; ``cond`` may likewise be traced.  The output is M×6 and
    carries gradients to whichever of the two was traced.  Row order of
    ``x_t`` is preserved; the seed rows enter only through nearest-neighbor
    sets and weighted means, so their order never matters.
    """
    x = np.asarray(x_t, dtype=np.float64)
    cond_val = _val(cond)
    if x.ndim != 2 or x.shape[1] != _ROW_DIM or x.shape[0] < 1:
        raise InvalidArgument(f"x_t must be (M, 6), got {x.shape}")
    if cond_val.ndim != 2 or cond_val.shape[1] != _ROW_DIM or cond_val.shape[0] < 1:
        raise InvalidArgument(f"cond must be (K, 6), got {cond_val.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("x_t contains NaN or Inf")

    n_rows, n_seeds = x.shape[0], cond_val.shape[0]
    m = min(NEIGHBORS, n_seeds)
    # Neighbor indices are frozen constants of the trace; the weights are
    # recomputed from the (possibly traced) seed coordinates so gradients
    # reach seed geometry through the distances.
    _, idx = cKDTree(cond_val[:, :3]).query(x[:, :3], k=m)
    idx = idx.reshape(n_rows, m)

    geo_mask = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    near = _take(cond, idx)  # (M, m, 6)
    diff = (near - x[:, None, :]) * geo_mask
    dist = _sqrt(_sum(diff * diff, axis=2))  # (M, m)
    w = 1.0 / (dist + _DIST_FLOOR)
    w = w * (1.0 / _sum(w, axis=1, keepdims=True))

    enc_w, enc_b = _param(params, "enc_w"), _param(params, "enc_b")
    x_feat = _mm(x, enc_w) + enc_b  # (M, h)
    seed_feat = _mm(cond, enc_w) + enc_b  # (K, h)
    near_feat = _take(seed_feat, idx)  # (M, m, h)
    agg = _sum(near_feat * _reshape(w, (n_rows, m, 1)), axis=1)  # (M, h)

    hdim = enc_w.value.shape[1] if _is_traced(enc_w) else enc_w.shape[1]
    fused = x_feat + agg + ad.sinusoidal_embedding(t, hdim)
    h1 = _tanh(_mm(fused, _param(params, "head1_w")) + _param(params, "head1_b"))
    h2 = _tanh(_mm(h1, _param(params, "head2_w")) + _param(params, "head2_b"))
    return _mm(h2, _param(params, "out_w")) + _param(params, "out_b")


class ToyDenoiser(ConditionalDenoiser):
    """Checkpoint adapter: plugs trained parameters into the sampler."""

    def __init__(self, params: ToyDenoiserParams):
        self.params = params

    def eps(self, x_t: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        return forward(self.params, x_t, np.asarray(cond, dtype=np.float64), t)

    def eps_traced(self, x_t: np.ndarray, cond: TracedValue, t: int) -> TracedValue:
        return forward(self.params, x_t, cond, t)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def _sphere(n: int, rng: np.random.Generator, radius: float = 0.8) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # Degenerate (all-zero) gaussian draws are a measure-zero event, but be
    # deterministic about them anyway.
    norms[norms == 0.0] = 1.0
    return radius * v / norms


def _box(n: int, rng: np.random.Generator, extent: float = 0.8) -> np.ndarray:
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-extent, extent, (n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, extent, -extent)
    for a in range(3):
        rows = axis == a
        others = [i for i in range(3) if i != a]
        pts[rows, a] = sign[rows]
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def _torus(n: int, rng: np.random.Generator, big: float = 0.55, small: float = 0.25) -> np.ndarray:
    out = np.empty((0, 3))
    while out.shape[0] < n:
        draw = max(64, 2 * (n - out.shape[0]))
        u = rng.uniform(0.0, 2.0 * np.pi, draw)
        v = rng.uniform(0.0, 2.0 * np.pi, draw)
        # Surface area density is proportional to big + small*cos(v);
        # rejection keeps the sample uniform over the actual surface.
        keep = rng.uniform(0.0, 1.0, draw) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _gradient_colors(pts: np.ndarray) -> np.ndarray:
    return np.clip((pts + 1.0) / 2.0, 0.0, 1.0)


def _checker_colors(pts: np.ndarray, cell: float = 0.25) -> np.ndarray:
    parity = np.floor(pts / cell).sum(axis=1) % 2
    return np.repeat(parity[:, None], 3, axis=1)


_SHAPES = {"sphere": _sphere, "box": _box, "torus": _torus}
_COLORINGS = {"gradient": _gradient_colors, "checker": _checker_colors}


def synth_shapes(kind: str, n_points: int, coloring: str, rng: np.random.Generator) -> ColoredPointCloud:
    """Uniform surface samples of a named primitive with procedural colors."""
    if kind not in _SHAPES:
        raise InvalidArgument(f"unknown shape kind {kind!r}; choose from {sorted(_SHAPES)}")
    if coloring not in _COLORINGS:
        raise InvalidArgument(f"unknown coloring {coloring!r}; choose from {sorted(_COLORINGS)}")
    if n_points < 1:
        raise InvalidArgument(f"n_points must be >= 1, got {n_points}")
    pts = _SHAPES[kind](n_points, rng)
    return ColoredPointCloud(pts, _COLORINGS[coloring](pts))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 256
    schedule: NoiseSchedule | None = None  # None: 8-step wide-noise cosine
    hidden: int = 64
    cond_points: int = 96
    kinds: tuple[str, ...] = ("sphere", "box", "torus")
    seed: int = 0

    def resolved_schedule(self) -> NoiseSchedule:
        if self.schedule is not None:
            return self.schedule
        # Spread the 8 steps over most of the cosine curve so training sees
        # genuinely noisy inputs, not just the near-clean regime.
        return make_schedule(8, "cosine", base_steps=12)


_STYLES = ("gradient", "checker")


def train(config: ToyTrainConfig, csv_path: str | Path | None = None):
    """Adam on the mean-squared noise-prediction error over random shapes.

    Returns (params, history) where history is a list of (step, loss)
    pairs, also written as CSV when ``csv_path`` is given.  Raises
    TrainingDiverged if the loss ever exceeds 1e6.
    """
    if config.steps < 0 or config.batch < 1 or config.cond_points < 1:
        raise InvalidArgument("steps must be >= 0; batch and cond_points >= 1")
    if not config.kinds or any(k not in _SHAPES for k in config.kinds):
        raise InvalidArgument(f"kinds must be a non-empty subset of {sorted(_SHAPES)}")
    sched = config.resolved_schedule()
    rng = np.random.default_rng(config.seed)
    params = init_params(rng, config.hidden)
    state = AdamState(_pack(params))
    names = _field_names()
    history: list[tuple[int, float]] = []

    for step in range(config.steps):
        kind = config.kinds[int(rng.integers(len(config.kinds)))]
        style = _STYLES[int(rng.integers(len(_STYLES)))]
        cloud = synth_shapes(kind, config.batch + config.cond_points, style, rng)
        rows = cloud.as_rows()
        x0, cond = rows[: config.batch], rows[config.batch :]
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal((config.batch, _ROW_DIM))
        x_t = add_noise(x0, t, eps, sched)

        template = _unpack(state.params, params)
        tape = Tape()
        traced = {n: tape.input(getattr(template, n)) for n in names}
        resid = forward(traced, x_t, cond, t) - eps
        loss = ad.vsum(resid * resid) * (1.0 / resid.value.size)
        loss_val = float(loss.value)
        history.append((step, loss_val))
        if not np.isfinite(loss_val) or loss_val > 1e6:
            raise TrainingDiverged(
                f"loss {loss_val:.3e} at step {step} (lr={config.lr}, batch={config.batch})"
            )
        tape.backward(loss)
        grads = np.concatenate([traced[n].grad.ravel() for n in names])
        adam_step(state, grads, config.lr)

    final = _unpack(state.params, params)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(history)
    return final, history


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, shape table, then raw little-endian float32.
# ---------------------------------------------------------------------------


def save_checkpoint(params: ToyDenoiserParams, path: str | Path) -> None:
    chunks = [_MAGIC, struct.pack("<BB", _VERSION, len(_field_names()))]
    for n in _field_names():
        arr = np.asarray(getattr(params, n))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for n in _field_names():
        chunks.append(np.asarray(getattr(params, n), dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> ToyDenoiserParams:
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != _MAGIC:
        raise UnsupportedStream("not a toy-denoiser checkpoint")
    version, n_arrays = struct.unpack_from("<BB", data, 4)
    if version != _VERSION:
        raise UnsupportedStream(f"checkpoint version {version} not supported")
    if n_arrays != len(_field_names()):
        raise DecodeError(f"expected {len(_field_names())} arrays, found {n_arrays}", offset=5)
    pos = 6
    shapes = []
    for _ in range(n_arrays):
        if pos + 1 > len(data):
            raise DecodeError("truncated shape table", offset=pos)
        ndim = data[pos]
        pos += 1
        if pos + 4 * ndim > len(data):
            raise DecodeError("truncated shape table", offset=pos)
        shapes.append(struct.unpack_from(f"<{ndim}I", data, pos))
        pos += 4 * ndim
    out = {}
    for name, shape in zip(_field_names(), shapes):
        size = int(np.prod(shape)) if shape else 1
        if pos + 4 * size > len(data):
            raise DecodeError("truncated parameter data", offset=pos)
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
        out[name] = arr.astype(np.float64).reshape(shape)
        pos += 4 * size
    return ToyDenoiserParams(**out)
