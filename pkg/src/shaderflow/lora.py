"""Low-rank Q/K/V adaptation confined to the condition branches.

Noise and material tokens go through the shared projections untouched;
each condition block adds ``strength * Z_c A^T B^T`` from its own adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import BranchLayout
from .errors import ConfigError, DimensionError
from .rng import Xoshiro256
from .tensor import Tensor

CONDITIONS = ("depth", "normal", "lighting")
SLOTS = ("q", "k", "v")
DEFAULT_STRENGTHS = {"depth": 1.0, "normal": 1.2, "lighting": 0.8}


@dataclass
class LoraAdapter:
    """Low-rank pair with A: r x d, B: d x r and a runtime strength."""

    A: Tensor
    B: Tensor
    strength: float = 1.0

    def __post_init__(self):
        r, d = self.A.shape
        if self.B.shape != (d, r):
            raise DimensionError(f"B must be {(d, r)}, got {self.B.shape}")
        if not 1 <= r <= d // 2:
            raise ConfigError(f"rank {r} must satisfy 1 <= r <= d/2 = {d // 2}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, d: int, r: int, rng: Xoshiro256, strength: float = 1.0) -> "LoraAdapter":
        bound = 1.0 / math.sqrt(d)
        A = Tensor(rng.uniforms((r, d), -bound, bound), requires_grad=True)
        B = Tensor(np.zeros((d, r)), requires_grad=True)
        return cls(A, B, strength)

    def delta_matrix(self) -> np.ndarray:
        """The d x d map strength * B A acting on column vectors."""
        return self.strength * (self.B.data @ self.A.data)


def lora_delta(Z_c: Tensor, adapter: LoraAdapter, slot: str = "?") -> Tensor:
    """Row-token delta ``strength * Z_c A^T B^T``."""
    if Z_c.shape[1] != adapter.dim:
        raise DimensionError(
            f"adapter slot {slot!r} expects width {adapter.dim}, tokens have width {Z_c.shape[1]}")
    low = T.matmul(Z_c, T.transpose(adapter.A))
    return T.mul(T.matmul(low, T.transpose(adapter.B)), adapter.strength)


@dataclass
class ConditionAdapterSet:
    """One Q/K/V adapter triple per condition type."""

    adapters: dict[str, dict[str, LoraAdapter]]

    @classmethod
    def init(cls, d: int, r: int, rng: Xoshiro256, strengths: dict[str, float] | None = None
             ) -> "ConditionAdapterSet":
        strengths = {**DEFAULT_STRENGTHS, **(strengths or {})}
        return cls({c: {s: LoraAdapter.init(d, r, rng, strengths[c]) for s in SLOTS}
                    for c in CONDITIONS})

    def __getitem__(self, condition: str) -> dict[str, LoraAdapter]:
        return self.adapters[condition]

    @property
    def strengths(self) -> dict[str, float]:
        return {c: self.adapters[c]["q"].strength for c in CONDITIONS}

    def parameters(self) -> list[Tensor]:
        return [t for c in CONDITIONS for s in SLOTS
                for t in (self.adapters[c][s].A, self.adapters[c][s].B)]

    def set_strength(self, condition: str, s: float) -> "ConditionAdapterSet":
        """Copy with a new strength for one condition; A/B tensors are shared."""
        if condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {condition!r}")
        if s < 0:
            raise ConfigError(f"strength must be non-negative, got {s}")
        adapters = {c: dict(triple) for c, triple in self.adapters.items()}
        adapters[condition] = {k: replace(a, strength=float(s)) for k, a in adapters[condition].items()}
        return ConditionAdapterSet(adapters)


def set_strength(adapters: ConditionAdapterSet, condition: str, s: float) -> ConditionAdapterSet:
    return adapters.set_strength(condition, s)


@dataclass
class ProjectionWeights:
    """Shared d x d projections; a token row z maps to z W^T."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {(d, d)}, got {getattr(self, name).shape}")

    def matrices(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.wq, self.wk, self.wv


def project_condition(Z_c: Tensor, weights: ProjectionWeights, triple: dict[str, LoraAdapter] | None
                      ) -> tuple[Tensor, Tensor, Tensor]:
    """Q/K/V of one condition block's tokens, adapter included."""
    out = []
    for slot, W in zip(SLOTS, weights.matrices()):
        base = T.matmul(Z_c, T.transpose(W))
        if triple is not None:
            base = T.add(base, lora_delta(Z_c, triple[slot], slot))
        out.append(base)
    return tuple(out)


def project_branches(Z: Tensor, layout: BranchLayout, weights: ProjectionWeights,
                     adapters: ConditionAdapterSet | None) -> tuple[Tensor, Tensor, Tensor]:
    """Q/K/V for the whole sequence.

    Noise and material rows are exactly the shared projections; condition
    block k rows additionally carry adapter k's delta.
    """
    if Z.shape[0] != layout.total:
        raise DimensionError(f"Z has {Z.shape[0]} rows but the layout needs {layout.total}")
    plain = [T.matmul(Z, T.transpose(W)) for W in weights.matrices()]
    if adapters is None or not any(layout.cond_lengths):
        return tuple(plain)
    out = []
    for slot, base in zip(SLOTS, plain):
        parts = [T.slice_rows(base, 0, layout.n_image)] if layout.n_image else []
        for k, name in enumerate(CONDITIONS[:len(layout.cond_lengths)]):
            lo, hi = layout.cond_bounds(k)
            if hi == lo:
                continue
            Z_c = T.slice_rows(Z, lo, hi)
            parts.append(T.add(T.slice_rows(base, lo, hi), lora_delta(Z_c, adapters[name][slot], slot)))
        out.append(T.concat_rows(parts))
    return tuple(out)
