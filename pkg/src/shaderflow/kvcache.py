"""Condition K/V caching for multi-step sampling.

Condition tokens never see the timestep and, under the SCMA mask, never
attend outside their own block.  Their per-block keys and values are
therefore the same at every denoising step, so they are computed once and
concatenated onto the noise/material keys and values at each step.  Only
noise and material rows are used as queries.
"""

from __future__ import annotations

import logging
import statistics
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import BranchLayout, build_scma_mask, mma
from .errors import CacheMismatchError
from .flow import FlowConfig, euler_step, euler_times, initial_noise, sample_euler
from .lora import CONDITIONS, project_condition
from .model import Conditioning, DiT, patchify
from .tensor import Tensor

log = logging.getLogger(__name__)

MATERIAL = "material"


@dataclass
class KVCacheStore:
    """(block, condition) -> (K, V) with K already rotary-encoded."""

    entries: dict[tuple[int, str], tuple[Tensor, Tensor]] = field(default_factory=dict)
    lengths: dict[str, int] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CONDITIONS})
    populated: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def _count(self, name: str) -> None:
        with self._lock:
            self.counters[name] = self.counters.get(name, 0) + 1

    def conditions(self) -> tuple[str, ...]:
        return tuple(c for c in CONDITIONS if self.lengths.get(c, 0) > 0)

    @property
    def caches_material(self) -> bool:
        return (0, MATERIAL) in self.entries

    def layout(self, n: int) -> BranchLayout:
        return BranchLayout(n, n, tuple(self.lengths.get(c, 0) for c in CONDITIONS))

    def get(self, block: int, name: str) -> tuple[Tensor, Tensor]:
        return self.entries[(block, name)]


def precompute_condition_kv(model: DiT, cond: Conditioning, store: KVCacheStore | None = None, *,
                            conditions: tuple[str, ...] | None = None,
                            cache_material: bool = False) -> KVCacheStore:
    """Run each condition branch through every block once and keep its K/V.

    Requested conditions with no input are skipped with a warning.  With
    ``cache_material`` the first block's material K/V is stored too; later
    blocks' material K/V depend on the noise tokens and cannot be cached.
    """
    store = KVCacheStore() if store is None else store
    if store.populated:
        raise CacheMismatchError("store is already populated")
    requested = conditions if conditions is not None else cond.present()
    last = len(model.blocks) - 1
    with T.no_grad():
        for name in requested:
            patches = model.condition_patches(cond, name)
            if patches is None:
                log.warning("condition %r has no input; not cached", name)
                continue
            n = patches.shape[0]
            positions = np.arange(n)
            X = model.embed_role(name, patches)
            for b, blk in enumerate(model.blocks):
                H = T.layer_norm(X, model.cfg.ln_eps)
                Q, K, V = project_condition(H, blk.proj, blk.adapters[name])
                K = model.rope(K, positions)
                store.entries[(b, name)] = (K, V)
                if b < last:
                    Q = model.rope(Q, positions)
                    X = model.mlp(blk, model.attn_out(blk, X, mma(Q, K, V, None, model.cfg.n_heads)))
            store.lengths[name] = n
            store._count(name)
        if cache_material:
            blk = model.blocks[0]
            n = model.cfg.tokens_per_grid
            X = model.embed_role(MATERIAL, patchify(cond.material.data, model.cfg.patch_size))
            H = T.layer_norm(X, model.cfg.ln_eps)
            K = model.rope(T.matmul(H, T.transpose(blk.proj.wk)), np.arange(n))
            store.entries[(0, MATERIAL)] = (K, T.matmul(H, T.transpose(blk.proj.wv)))
    store.populated = True
    return store


def _check_store(model: DiT, store: KVCacheStore, layout: BranchLayout | None) -> BranchLayout:
    n = model.cfg.tokens_per_grid
    if not store.populated:
        raise CacheMismatchError("store has not been populated")
    expected = store.layout(n)
    if layout is not None and layout != expected:
        raise CacheMismatchError(f"store holds {expected}, caller expects {layout}")
    for name in store.conditions():
        for b in range(len(model.blocks)):
            if (b, name) not in store.entries:
                raise CacheMismatchError(f"store lacks block {b} for condition {name!r}")
            if store.entries[(b, name)][0].shape[1] != model.cfg.d_model:
                raise CacheMismatchError("cached K/V width does not match the model")
    return expected


def cached_forward(model: DiT, x: Tensor, cond: Conditioning, t: float, store: KVCacheStore,
                   layout: BranchLayout | None = None) -> Tensor:
    """Noise-block velocity computing only noise/material rows.

    Reads ``cond.material`` only; condition K/V come from ``store``.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    layout = _check_store(model, store, layout)
    n = model.cfg.tokens_per_grid
    positions = np.tile(np.arange(n), 2)
    scma = build_scma_mask(layout)
    material = patchify(cond.material.data, model.cfg.patch_size)
    X = T.concat_rows([model.embed_noise(x, t), model.embed_role(MATERIAL, material)])
    last = len(model.blocks) - 1
    for b, blk in enumerate(model.blocks):
        H = T.layer_norm(X, model.cfg.ln_eps)
        n_q = n if b == last else 2 * n
        Hq = H if n_q == 2 * n else T.slice_rows(H, 0, n)
        Q = model.rope(T.matmul(Hq, T.transpose(blk.proj.wq)), positions[:n_q])
        if b == 0 and store.caches_material:
            Hn = T.slice_rows(H, 0, n)
            Km, Vm = store.get(0, MATERIAL)
            keys = [model.rope(T.matmul(Hn, T.transpose(blk.proj.wk)), positions[:n]), Km]
            values = [T.matmul(Hn, T.transpose(blk.proj.wv)), Vm]
        else:
            keys = [model.rope(T.matmul(H, T.transpose(blk.proj.wk)), positions)]
            values = [T.matmul(H, T.transpose(blk.proj.wv))]
        for name in store.conditions():
            Kc, Vc = store.get(b, name)
            keys.append(Kc)
            values.append(Vc)
        A = mma(Q, T.concat_rows(keys), T.concat_rows(values), scma.rows(0, n_q), model.cfg.n_heads)
        Xq = X if n_q == 2 * n else T.slice_rows(X, 0, n)
        X = model.mlp(blk, model.attn_out(blk, Xq, A))
    return model.head(X)


def sample_cached(model: DiT, cond: Conditioning, cfg: FlowConfig, noise: Tensor | None = None, *,
                  store: KVCacheStore | None = None, cache_material: bool = False) -> Tensor:
    """Euler sampling identical to ``sample_euler`` but with cached condition K/V.

    Pass an empty ``store`` to inspect it (e.g. its counters) afterwards.
    """
    x = noise if noise is not None else initial_noise(model.noise_shape(), cfg)
    dt = 1.0 / cfg.num_steps
    with T.no_grad():
        store = precompute_condition_kv(model, cond, store, cache_material=cache_material)
        for step, t in enumerate(euler_times(cfg.num_steps)):
            x = euler_step(x, cached_forward(model, x, cond, float(t), store), dt, step)
    return x


def sample(model: DiT, cond: Conditioning, cfg: FlowConfig, *, cache: bool = True,
           noise: Tensor | None = None, cache_material: bool = False) -> Tensor:
    if cache:
        return sample_cached(model, cond, cfg, noise, cache_material=cache_material)
    return sample_euler(model, cond, cfg, model.noise_shape(), noise)


@dataclass
class BenchRecord:
    steps: int
    cached_ms: float
    uncached_ms: float
    maxdiff: float

    @property
    def speedup(self) -> float:
        return self.uncached_ms / self.cached_ms

    def line(self) -> str:
        return (f"steps={self.steps} cached_ms={self.cached_ms:.3f} uncached_ms={self.uncached_ms:.3f} "
                f"speedup={self.speedup:.3f} maxdiff={self.maxdiff:.3e}")


def bench_kv(model: DiT, cond: Conditioning, steps: int = 25, runs: int = 5, seed: int = 0,
             cache_material: bool = False) -> BenchRecord:
    """Median-of-``runs`` wall clock for both samplers after one warm-up each, on one thread."""
    cfg = FlowConfig(num_steps=steps, seed=seed)
    noise = initial_noise(model.noise_shape(), cfg)

    def timed(cache: bool) -> tuple[float, Tensor]:
        start = time.perf_counter()
        out = sample(model, cond, cfg, cache=cache, noise=noise, cache_material=cache_material)
        return (time.perf_counter() - start) * 1e3, out

    with threadpool_limits(limits=1):
        _, ref = timed(False)
        _, fast = timed(True)
        uncached, cached = [], []
        for _ in range(runs):
            uncached.append(timed(False)[0])
            cached.append(timed(True)[0])
    return BenchRecord(steps, statistics.median(cached), statistics.median(uncached),
                       float(np.abs(ref.data - fast.data).max()))
