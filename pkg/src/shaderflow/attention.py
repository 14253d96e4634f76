"""Token layout, attention masks, rotary embedding and masked attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import NEG_INF, Tensor

NOISE, MATERIAL = 0, 1


@dataclass(frozen=True)
class BranchLayout:
    """Token counts of the blocks [noise, material, cond_1, ..., cond_m]."""

    n_noise: int
    n_material: int
    cond_lengths: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cond_lengths", tuple(int(c) for c in self.cond_lengths))
        if self.n_noise < 0 or self.n_material < 0 or any(c < 0 for c in self.cond_lengths):
            raise ConfigError(f"block sizes must be non-negative: {self}")

    @property
    def n_image(self) -> int:
        return self.n_noise + self.n_material

    @property
    def total(self) -> int:
        return self.n_image + sum(self.cond_lengths)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.n_noise, self.n_material, *self.cond_lengths)

    def block_bounds(self) -> list[tuple[int, int]]:
        """(start, stop) of every block in sequence order."""
        edges = np.cumsum((0, *self.sizes))
        return [(int(edges[i]), int(edges[i + 1])) for i in range(len(self.sizes))]

    def cond_bounds(self, k: int) -> tuple[int, int]:
        return self.block_bounds()[2 + k]

    def block_ids(self) -> np.ndarray:
        """Block index of each token: 0 noise, 1 material, 2 + k condition k."""
        return np.repeat(np.arange(len(self.sizes)), self.sizes)

    def without_condition(self, k: int) -> "BranchLayout":
        lengths = list(self.cond_lengths)
        lengths[k] = 0
        return BranchLayout(self.n_noise, self.n_material, tuple(lengths))


class AttentionMask:
    """Additive attention mask whose entries are exactly 0 or -inf."""

    def __init__(self, entries: np.ndarray):
        entries = np.asarray(entries, dtype=np.float64)
        if entries.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {entries.shape}")
        if not np.all((entries == 0.0) | np.isneginf(entries)):
            raise ValueError("mask entries must be 0 or -inf")
        entries.flags.writeable = False
        self.entries = entries

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def allowed(self) -> np.ndarray:
        return self.entries == 0.0

    def rows(self, start: int, stop: int) -> "AttentionMask":
        return AttentionMask(self.entries[start:stop].copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.entries, other.entries)

    def to_ascii(self) -> str:
        """One line per row, ``0`` for allowed and ``-`` for masked."""
        return "".join("".join("0" if ok else "-" for ok in row) + "\n" for row in self.allowed())

    @classmethod
    def from_ascii(cls, text: str) -> "AttentionMask":
        rows = [line for line in text.splitlines() if line]
        if not rows:
            return cls(np.zeros((0, 0)))
        grid = np.array([[0.0 if ch == "0" else NEG_INF for ch in row] for row in rows])
        return cls(grid)


def build_no_mask(n: int) -> AttentionMask:
    return AttentionMask(np.zeros((n, n)))


def build_causal_mask(n: int) -> AttentionMask:
    """Position i may attend to positions j <= i."""
    if n < 1:
        raise ValueError("n must be >= 1")
    entries = np.zeros((n, n))
    entries[np.triu_indices(n, k=1)] = NEG_INF
    return AttentionMask(entries)


def build_scma_mask(layout: BranchLayout) -> AttentionMask:
    """Mask under which image rows see everything and each condition sees only itself.

    Rows in the noise or material block attend to all columns.  Rows in
    condition block k attend to the columns of block k only, so condition
    outputs never depend on image tokens or on other conditions.
    """
    ids = layout.block_ids()
    image_row = ids[:, None] <= MATERIAL
    same_block = ids[:, None] == ids[None, :]
    return AttentionMask(np.where(image_row | same_block, 0.0, NEG_INF))


# rotary position embedding -----------------------------------------------------

@dataclass(frozen=True)
class RopeFrequencies:
    dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ConfigError(f"rotary dimension must be even and positive, got {self.dim}")

    @property
    def thetas(self) -> np.ndarray:
        j = np.arange(self.dim // 2)
        return self.base ** (-2.0 * j / self.dim)


def rope_angles(positions: Sequence[int], freqs: RopeFrequencies) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    if np.any(pos < 0):
        raise ValueError("positions must be non-negative")
    angles = pos[:, None] * freqs.thetas[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(tokens: Tensor, positions: Sequence[int], freqs: RopeFrequencies,
               angles: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Rotate each pair (x[2j], x[2j+1]) of token i by positions[i] * theta_j.

    ``angles`` may carry a precomputed ``rope_angles`` result.
    """
    n, d = tokens.shape
    if d != freqs.dim:
        raise ConfigError(f"token width {d} does not match rotary dimension {freqs.dim}")
    if len(positions) != n:
        raise DimensionError(f"{len(positions)} positions for {n} tokens")
    cos, sin = angles if angles is not None else rope_angles(positions, freqs)
    x = tokens.data
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos

    def grad_fn(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        back = np.empty_like(g)
        back[:, 0::2] = ge * cos + go * sin
        back[:, 1::2] = -ge * sin + go * cos
        return (back,)

    return T.record("rope", out, (tokens,), grad_fn)


# attention -------------------------------------------------------------------------

def mma(Q: Tensor, K: Tensor, V: Tensor, mask: AttentionMask | np.ndarray | None = None,
        n_heads: int = 1) -> Tensor:
    """softmax(Q K^T / sqrt(d_head) + mask) V, per head.

    Q may have fewer rows than K/V (queries for a subset of tokens); the
    mask is then n_q x n_k.
    """
    n_q, d = Q.shape
    n_k = K.shape[0]
    if K.shape[1] != d or V.shape != K.shape:
        raise DimensionError(f"mma: incompatible Q {Q.shape}, K {K.shape}, V {V.shape}")
    if d % n_heads:
        raise ConfigError(f"width {d} is not divisible by {n_heads} heads")
    entries = None
    if mask is not None:
        entries = mask.entries if isinstance(mask, AttentionMask) else np.asarray(mask)
        if entries.shape != (n_q, n_k):
            raise DimensionError(f"mask shape {entries.shape} does not match ({n_q}, {n_k})")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(n_heads):
        if n_heads == 1:
            q, k, v = Q, K, V
        else:
            lo, hi = h * dh, (h + 1) * dh
            q, k, v = T.slice_cols(Q, lo, hi), T.slice_cols(K, lo, hi), T.slice_cols(V, lo, hi)
        scores = T.mul(T.matmul(q, T.transpose(k)), scale)
        outs.append(T.matmul(T.softmax_rows(scores, entries), v))
    return outs[0] if n_heads == 1 else T.concat_cols(outs)
