"""Named property checks run by ``shaderflow verify``.

Each check is a function that raises ``AssertionError`` with a message on
failure.  Checks look modules up at call time (``attention.build_scma_mask``
rather than a bound import) so a patched implementation is what gets
tested.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, ensemble, flow, kvcache, lora
from . import tensor as T
from .config import KEYS, describe_keys
from .model import DiT, Internals, ModelConfig, make_synthetic_dataset
from .rng import Xoshiro256
from .tensor import Tensor


@dataclass(frozen=True)
class Check:
    name: str
    doc: str
    fn: Callable[[], None]


@dataclass
class CheckResult:
    name: str
    ok: bool
    message: str
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        tail = f": {self.message}" if self.message else ""
        return f"{status} {self.name} ({self.seconds:.2f}s){tail}"


REGISTRY: dict[str, Check] = {}


def check(name: str, doc: str):
    def register(fn):
        REGISTRY[name] = Check(name, doc, fn)
        return fn
    return register


def _close(a, b, tol, what):
    diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))
    assert diff <= tol, f"{what}: max abs diff {diff:.3e} > {tol:.1e}"


def small_model(seed: int, grid: int = 4, d: int = 8, n_blocks: int = 2) -> DiT:
    """Random model whose adapters and head are non-zero."""
    rng = Xoshiro256(seed)
    model = DiT(ModelConfig(d_model=d, n_blocks=n_blocks, lora_rank=2, grid=grid), rng, zero_head=False)
    for blk in model.blocks:
        for c in lora.CONDITIONS:
            for a in blk.adapters[c].values():
                a.B.data = rng.uniforms(a.B.shape, -0.5, 0.5)
    return model


def scma_oracle(layout: attention.BranchLayout) -> np.ndarray:
    """Brute-force membership rule, one (i, j) at a time."""
    owner = []
    for b, size in enumerate(layout.sizes):
        owner += [b] * size
    n = len(owner)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = owner[i] in (0, 1) or owner[i] == owner[j]
    return out


# tensor -----------------------------------------------------------------------------

@check("matmul", "matmul agrees with a triple-loop oracle")
def _matmul():
    rng = Xoshiro256(1)
    for m, k, n in [(1, 1, 1), (3, 4, 2), (5, 2, 6)]:
        a, b = rng.normals((m, k)), rng.normals((k, n))
        ref = np.array([[sum(a[i, p] * b[p, j] for p in range(k)) for j in range(n)] for i in range(m)])
        _close(T.matmul(Tensor(a), Tensor(b)).data, ref, 1e-12, "matmul")


@check("softmax", "softmax rows sum to one and are shift invariant")
def _softmax():
    x = Xoshiro256(2).normals((4, 6))
    s = T.softmax_rows(Tensor(x)).data
    _close(s.sum(axis=1), np.ones(4), 1e-12, "row sums")
    _close(T.softmax_rows(Tensor(x + 7.5)).data, s, 1e-12, "shift invariance")


@check("layer_norm", "layer_norm output has zero mean per row")
def _layer_norm():
    x = Xoshiro256(3).normals((5, 8)) * 4.0 + 2.0
    y = T.layer_norm(Tensor(x)).data
    _close(y.mean(axis=1), np.zeros(5), 1e-10, "row mean")


@check("backward", "reverse-mode gradients match central differences")
def _backward():
    rng = Xoshiro256(4)
    w = Tensor(rng.normals((3, 4)), requires_grad=True)
    v = Tensor(rng.normals((4, 2)))

    def f(x):
        h = T.gelu(T.layer_norm(T.matmul(x, v)))
        return T.sum(T.mul(T.softmax_rows(h), h))

    T.backward(f(w))
    num = T.finite_diff_grad(f, w, 1e-5).data
    rel = np.abs(w.grad - num).max() / max(np.abs(num).max(), 1e-12)
    assert rel < 1e-4, f"relative gradient error {rel:.3e}"


@check("tensor_format", "tensor text format round-trips exactly")
def _tensor_format():
    x = Xoshiro256(5).normals((2, 3, 2))
    assert np.array_equal(T.parse_tensor(T.format_tensor(x)).data, x), "values changed in round-trip"


# attention --------------------------------------------------------------------------

@check("scma", "SCMA mask matches the brute-force membership oracle")
def _scma():
    for sizes in itertools.product(range(4), repeat=5):
        layout = attention.BranchLayout(sizes[0], sizes[1], sizes[2:])
        mask = attention.build_scma_mask(layout)
        expected = scma_oracle(layout)
        assert mask.shape == expected.shape, f"shape {mask.shape} for sizes {sizes}"
        bad = np.argwhere(mask.allowed() != expected)
        assert bad.size == 0, f"sizes {sizes}: {len(bad)} mismatches, first at {tuple(bad[0])}"


@check("causal", "causal mask allows exactly j <= i")
def _causal():
    for n in (1, 2, 5):
        allowed = attention.build_causal_mask(n).allowed()
        assert np.array_equal(allowed, np.tril(np.ones((n, n), dtype=bool))), f"n={n}"


@check("rope", "rotary embedding preserves pair norms and depends on relative position")
def _rope():
    rng = Xoshiro256(6)
    freqs = attention.RopeFrequencies(8)
    q, k = Tensor(rng.normals((1, 8))), Tensor(rng.normals((1, 8)))
    r = attention.apply_rope(q, [5], freqs).data
    _close(np.hypot(r[0, 0::2], r[0, 1::2]), np.hypot(q.data[0, 0::2], q.data[0, 1::2]), 1e-12, "pair norms")
    for shift in (1, 7, 30):
        a = attention.apply_rope(q, [3], freqs).data @ attention.apply_rope(k, [9], freqs).data.T
        b = attention.apply_rope(q, [3 + shift], freqs).data @ attention.apply_rope(k, [9 + shift], freqs).data.T
        _close(a, b, 1e-9, f"relative position, shift {shift}")


# adapters ---------------------------------------------------------------------------

@check("lora_rank", "adapter delta matrix has rank at most r")
def _lora_rank():
    rng = Xoshiro256(7)
    a = lora.LoraAdapter.init(8, 2, rng)
    a.B.data = rng.normals(a.B.shape)
    sv = np.linalg.svd(a.delta_matrix(), compute_uv=False)
    assert sv[2:].max() <= 1e-10 * sv[0], f"singular values beyond rank: {sv[2:]}"


@check("lora_linearity", "adapter delta scales linearly with strength")
def _lora_linearity():
    rng = Xoshiro256(8)
    a = lora.LoraAdapter.init(8, 2, rng, strength=0.7)
    a.B.data = rng.normals(a.B.shape)
    z = Tensor(rng.normals((5, 8)))
    d1 = lora.lora_delta(z, a).data
    d2 = lora.lora_delta(z, lora.LoraAdapter(a.A, a.B, 1.4)).data
    assert np.array_equal(d2, 2.0 * d1), "delta(2s) != 2 delta(s)"


@check("lora_zero_init", "fresh adapters leave the model output unchanged")
def _lora_zero_init():
    model = DiT(ModelConfig(d_model=8, lora_rank=2, grid=4), Xoshiro256(9), zero_head=False)
    cond = make_synthetic_dataset(1, 4, 9)[0].cond
    x = Tensor(Xoshiro256(10).normals(model.noise_shape()))
    with T.no_grad():
        Z, layout, pos = model.tokenize(x, cond)
        with_adapters = model.forward(Z, layout, 0.5, pos).data
        for blk in model.blocks:
            blk.adapters = None
        without = model.forward(Z, layout, 0.5, pos).data
    _close(with_adapters, without, 1e-12, "zero-init output")


@check("branch_isolation", "adapters never change noise or material Q/K/V rows")
def _branch_isolation():
    rng = Xoshiro256(11)
    d, n = 8, 3
    layout = attention.BranchLayout(n, n, (n, n, n))
    proj = lora.ProjectionWeights(*(Tensor(rng.normals((d, d))) for _ in range(3)))
    for trial in range(5):
        Z = Tensor(rng.normals((layout.total, d)))
        adapters = lora.ConditionAdapterSet.init(d, 2, rng)
        for triple in adapters.adapters.values():
            for a in triple.values():
                a.B.data = rng.normals(a.B.shape)
        plain = lora.project_branches(Z, layout, proj, None)
        adapted = lora.project_branches(Z, layout, proj, adapters)
        for p, q in zip(plain, adapted):
            assert np.array_equal(p.data[:2 * n], q.data[:2 * n]), f"trial {trial}: image rows changed"
            assert not np.array_equal(p.data[2 * n:], q.data[2 * n:]), f"trial {trial}: adapters had no effect"


# model / flow -----------------------------------------------------------------------

@check("timestep_invariance", "condition K/V are identical for every t")
def _timestep_invariance():
    model = small_model(12)
    cond = make_synthetic_dataset(1, 4, 12)[0].cond
    x = Tensor(Xoshiro256(13).normals(model.noise_shape()))
    runs = []
    with T.no_grad():
        Z, layout, pos = model.tokenize(x, cond)
        for t in (0.0, 0.37, 1.0):
            internals = Internals()
            model.forward(Z, layout, t, pos, internals)
            runs.append(internals)
    lo = layout.n_image
    for b in range(len(model.blocks)):
        for other in runs[1:]:
            for u, v in zip(runs[0].kv[b], other.kv[b]):
                assert np.array_equal(u.data[lo:], v.data[lo:]), f"block {b}: condition K/V depend on t"


@check("flow_endpoints", "flow path hits x0 at t=0 and eps at t=1 exactly")
def _flow_endpoints():
    rng = Xoshiro256(14)
    x0, eps = Tensor(rng.normals((4, 3))), Tensor(rng.normals((4, 3)))
    assert np.array_equal(flow.flow_path(x0, eps, 0.0).data, x0.data), "t=0"
    assert np.array_equal(flow.flow_path(x0, eps, 1.0).data, eps.data), "t=1"


@check("euler_oracle", "Euler sampling with the true constant velocity recovers x0")
def _euler_oracle():
    rng = Xoshiro256(15)
    x0, eps = rng.normals((4, 3)), rng.normals((4, 3))
    velocity = Tensor(eps - x0)
    for steps in (1, 5, 25):
        out = flow.sample_euler(lambda x, t, c: velocity, None, flow.FlowConfig(num_steps=steps),
                                (4, 3), Tensor(eps))
        _close(out.data, x0, 1e-10, f"{steps} steps")


# kv cache ---------------------------------------------------------------------------

@check("kv_equivalence", "cached sampling equals uncached sampling")
def _kv_equivalence():
    model = small_model(16)
    cond = make_synthetic_dataset(1, 4, 16)[0].cond
    for steps in (1, 5):
        cfg = flow.FlowConfig(num_steps=steps, seed=steps)
        store = kvcache.KVCacheStore()
        fast = kvcache.sample_cached(model, cond, cfg, store=store)
        slow = kvcache.sample(model, cond, cfg, cache=False)
        _close(fast.data, slow.data, 1e-10, f"{steps} steps")
        assert all(v == 1 for v in store.counters.values()), f"counters {store.counters}"


# ensemble ---------------------------------------------------------------------------

@check("depth_objective", "depth objective reproduces its hand-computed values")
def _depth_objective():
    base = np.linspace(0.0, 1.0, 6).reshape(2, 3)
    preds = np.stack([base, base])
    ident = ensemble.AffineParams.identity(2)
    assert ensemble.depth_objective(preds, ident, 0.1) == 0.0, "identical preds"
    zero = ensemble.AffineParams(np.zeros(2), np.zeros(2))
    assert ensemble.depth_objective(preds, zero, 0.1) == 0.1, "collapsed params"
    pair = np.array([[[0.0, 1.0]], [[0.5, 1.5]]])
    shift = ensemble.AffineParams(np.ones(2), np.array([0.0, -0.5]))
    assert ensemble.depth_objective(pair, shift, 0.0) == 0.0, "shifted pair"


@check("depth_gauge", "pairwise term ignores a common offset and scales with a common scale")
def _depth_gauge():
    preds = Xoshiro256(17).uniforms((3, 4, 4))
    aligned = preds
    moved = 2.0 * preds + 0.3
    p1 = ensemble.pairwise_term(aligned)
    p2 = ensemble.pairwise_term(moved)
    assert math.isclose(2.0 * p1, p2, rel_tol=1e-12), "pairwise term is not scale-equivariant"
    ident = ensemble.AffineParams.identity(3)
    joint = ensemble.AffineParams(np.full(3, 2.0), np.full(3, 0.3))
    assert ensemble.depth_objective(preds, ident, 0.1) != ensemble.depth_objective(preds, joint, 0.1)


@check("merge_median", "merged depth is the pixelwise median")
def _merge_median():
    preds = np.array([[[0.0]], [[10.0]], [[0.5]]])
    assert ensemble.merge_depth(preds, ensemble.AffineParams.identity(3))[0, 0] == 0.5
    pair = np.array([[[0.2]], [[0.4]]])
    assert math.isclose(ensemble.merge_depth(pair, ensemble.AffineParams.identity(2))[0, 0], 0.3)


@check("depth_align", "alignment of affinely distorted copies recovers the base map")
def _depth_align():
    base = Xoshiro256(18).uniforms((6, 6))
    base = (base - base.min()) / (base.max() - base.min())
    preds = np.stack([(base - t) / s for s, t in ((2.0, 0.1), (0.5, 0.3))])
    result = ensemble.align_depth(preds, 0.1)
    assert result.objective < 1e-6, f"objective {result.objective:.3e}"
    assert np.all(np.diff(result.trace) <= 0), "trace increased"
    _close(ensemble.merge_depth(preds, result.params), base, 1e-3, "merged map")


@check("normals_selection", "normal ensemble selects an input vector per pixel")
def _normals():
    h = math.sqrt(0.5)
    preds = np.array([[[[1.0, 0, 0]]], [[[0, 1.0, 0]]], [[[h, h, 0]]]])
    assert np.array_equal(ensemble.ensemble_normals(preds)[0, 0], preds[2, 0, 0]), "worked example"
    rng = Xoshiro256(19)
    v = rng.normals((4, 3, 3, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    out = ensemble.ensemble_normals(v)
    member = (out[None] == v).all(axis=-1).any(axis=0)
    assert member.all(), "output vector not in input set"


@check("lighting_identity", "reconstruct inverts lighting_residual")
def _lighting():
    rng = Xoshiro256(20)
    I, A, l = rng.uniforms((4, 4, 3)), rng.uniforms((4, 4, 3)), rng.uniforms((4, 4))
    R = ensemble.lighting_residual(I, A, l)
    _close(ensemble.reconstruct(A, l, R), I, 1e-15, "round-trip")


# cli --------------------------------------------------------------------------------

@check("config_docs", "--help documents every config key with its default")
def _config_docs():
    text = describe_keys()
    for key in KEYS:
        assert key.name in text, f"key {key.name} missing from help"


def list_checks() -> list[str]:
    return [f"{c.name}: {c.doc}" for c in REGISTRY.values()]


def run_checks(names: list[str] | None = None) -> list[CheckResult]:
    selected = list(REGISTRY) if not names else names
    unknown = [n for n in selected if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}")
    results = []
    for name in selected:
        start = time.perf_counter()
        try:
            REGISTRY[name].fn()
            ok, msg = True, ""
        except AssertionError as exc:
            ok, msg = False, str(exc) or "assertion failed"
        except Exception as exc:  # a crash is also a failure of that property
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, msg, time.perf_counter() - start))
    return results
