"""Flow-matching objective and Euler ODE sampler.

Conventions: t=0 is data, t=1 is noise, the interpolant is
x_t = (1-t)*x0 + t*x1 and the regression target is x1 - x0. Sampling
integrates from t=1 down to t=0 on a uniform grid; a constant velocity
field is therefore integrated exactly in one step. Conditions do not
depend on t or x_t, so the sampler takes a prebuilt condition stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class SamplerError(RuntimeError):
    pass


@dataclass
class FlowSample:
    x0: np.ndarray        # data, in [-1, 1]
    x1: np.ndarray        # standard normal noise
    t: np.ndarray         # [B] in [0, 1]
    x_t: np.ndarray       # (1-t)*x0 + t*x1
    v_target: np.ndarray  # x1 - x0


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")


def make_flow_sample(x0: np.ndarray, rng, t=None) -> FlowSample:
    """Draw (x1, t) and build the interpolant. t defaults to Uniform(0,1)."""
    x0 = np.asarray(x0)
    b = x0.shape[0]
    x1 = rng.standard_normal(x0.shape).astype(x0.dtype)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
    tb = t.reshape((b,) + (1,) * (x0.ndim - 1)).astype(x0.dtype)
    x_t = (1.0 - tb) * x0 + tb * x1
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, v_target=x1 - x0)


def fm_loss(v_pred: Tensor, sample: FlowSample) -> Tensor:
    """Mean squared error against the target velocity, over all elements."""
    target = ad.tensor(sample.v_target.astype(v_pred.data.dtype))
    return ad.mse(v_pred, target)


def guided_velocity(v_cond: np.ndarray, v_null: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: v_null + scale * (v_cond - v_null).
    scale=1 returns v_cond exactly."""
    if scale == 1.0:
        return v_cond
    return v_null + scale * (v_cond - v_null)


def initial_noise(shape, seed: int, index0: int = 0) -> np.ndarray:
    """Per-image derived noise: image i gets its own sub-stream, so batch
    composition never changes an individual image's trajectory."""
    from .rng import stream
    b = shape[0]
    return np.stack([stream(seed, "sample-noise", index0 + i)
                     .standard_normal(shape[1:]).astype(np.float32)
                     for i in range(b)])


def euler_sample(velocity_fn, x_init: np.ndarray, cfg: SamplerConfig,
                 velocity_fn_null=None, t_start: float = 1.0) -> np.ndarray:
    """Integrate dx/dt = v from noise (t=1) to data (t=0), starting at x_init.

    velocity_fn(x, t) -> velocity array; velocity_fn_null supplies the
    unconditional field when guidance_scale != 1. The result is clamped to
    [-1, 1] only at the final emission. t_start < 1 integrates only the tail
    of the trajectory (x_init must then be a partially noised image, as in
    image-seeded editing).
    """
    if not 0.0 < t_start <= 1.0:
        raise SamplerError(f"t_start must be in (0, 1], got {t_start}")
    x = np.asarray(x_init, dtype=np.float32)
    dt = 1.0 / cfg.steps
    for k in range(max(1, round(t_start * cfg.steps)), 0, -1):
        t = k / cfg.steps
        v = velocity_fn(x, t)
        if cfg.guidance_scale != 1.0:
            if velocity_fn_null is None:
                raise SamplerError("guidance_scale != 1 requires a null-condition field")
            v = guided_velocity(v, velocity_fn_null(x, t), cfg.guidance_scale)
        x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite state at integration step {k}")
    return np.clip(x, -1.0, 1.0)
