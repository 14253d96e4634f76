"""Rectified-flow path, flow-matching loss and Euler sampler.

A velocity predictor is any callable ``model(x_t, t, conds) -> Tensor``
returning a tensor shaped like ``x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NonFiniteError
from .rng import Xoshiro256
from .tensor import Tensor

VelocityModel = Callable[[Tensor, float, Any], Tensor]


@dataclass
class FlowConfig:
    """Sampler settings.

    The loss weighting ``w_t * lambda'_t`` of the general flow-matching
    objective is fixed to 1, so ``weighting`` only ever reads "uniform".
    """

    num_steps: int = 25
    seed: int = 0
    weighting: str = "uniform"

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.weighting != "uniform":
            raise ConfigError("only uniform loss weighting is supported")


@dataclass
class FlowSample:
    x0: Tensor
    eps: Tensor
    t: float
    xt: Tensor

    @classmethod
    def draw(cls, x0: Tensor, rng: Xoshiro256, t: float | None = None, eps: Tensor | None = None
             ) -> "FlowSample":
        """Draw t ~ U(0, 1) then eps ~ N(0, I) unless given."""
        if t is None:
            t = rng.random()
        if eps is None:
            eps = Tensor(rng.normals(x0.shape))
        return cls(x0, eps, t, flow_path(x0, eps, t))


def flow_path(x0: Tensor, eps: Tensor, t: float) -> Tensor:
    """Straight line ``(1 - t) x0 + t eps``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    if t == 0.0:
        return x0
    if t == 1.0:
        return eps
    return T.add(T.mul(x0, 1.0 - t), T.mul(eps, t))


def cfm_loss(model: VelocityModel, x0: Tensor, conds: Any, rng: Xoshiro256, *,
             t: float | None = None, eps: Tensor | None = None, reduction: str = "mean") -> Tensor:
    """Squared error between predicted velocity and ``eps - x0``.

    ``reduction="mean"`` averages over elements; ``"sum"`` gives the squared
    L2 norm of the residual, which is what training minimises.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    sample = FlowSample.draw(x0, rng, t, eps)
    pred = model(sample.xt, sample.t, conds)
    target = Tensor(sample.eps.data - x0.data)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} does not match target {target.shape}")
    diff = T.sub(pred, target)
    sq = T.mul(diff, diff)
    return T.mean(sq) if reduction == "mean" else T.sum(sq)


def initial_noise(shape: tuple[int, ...], cfg: FlowConfig) -> Tensor:
    """The t = 1 starting point drawn from ``cfg.seed``."""
    return Tensor(Xoshiro256(cfg.seed).normals(shape))


def euler_times(num_steps: int) -> np.ndarray:
    return 1.0 - np.arange(num_steps) / num_steps


def sample_euler(model: VelocityModel, conds: Any, cfg: FlowConfig, shape: tuple[int, ...],
                 noise: Tensor | None = None) -> Tensor:
    """Integrate dx/dt = v from t = 1 down to t = 0 in uniform steps."""
    x = noise if noise is not None else initial_noise(shape, cfg)
    dt = 1.0 / cfg.num_steps
    with T.no_grad():
        for step, t in enumerate(euler_times(cfg.num_steps)):
            x = euler_step(x, model(x, float(t), conds), dt, step)
    return x


def euler_step(x: Tensor, v: Tensor, dt: float, step: int) -> Tensor:
    new = x.data - dt * v.data
    if not np.isfinite(new).all():
        raise NonFiniteError(f"sampler state became non-finite at step {step}")
    return Tensor(new, _check=False)
