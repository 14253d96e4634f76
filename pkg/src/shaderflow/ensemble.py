"""Test-time ensembling of depth and normal predictions, and the lighting identity.

Depth: N predictions are affinely aligned by minimising

    sqrt( (1/b) sum_{i<j} ||d'_i - d'_j||^2 ) + lam * (|min m| + |1 - max m|)

with d'_i = s_i * d_i + t_i, b = C(N, 2) and m the pixelwise median of the
aligned maps; m is the merged prediction.

Normals: per pixel, the prediction closest in cosine to the normalised mean.

Lighting: I = A * l + R, with R the non-diffuse residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import helmert
from scipy.optimize import minimize

from .errors import DimensionError, NonFiniteError

NM_CHUNK = 20
DEGENERATE_MEAN_NORM = 1e-8


@dataclass
class AffineParams:
    scales: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.scales.shape != self.offsets.shape or self.scales.ndim != 1:
            raise DimensionError("scales and offsets must be vectors of equal length")

    def __len__(self) -> int:
        return self.scales.size

    @classmethod
    def identity(cls, n: int) -> "AffineParams":
        return cls(np.ones(n), np.zeros(n))

    def apply(self, preds: np.ndarray) -> np.ndarray:
        return preds * self.scales[:, None, None] + self.offsets[:, None, None]


def _check_depth(preds) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] < 1:
        raise DimensionError(f"depth predictions must be N x H x W, got {preds.shape}")
    if not np.isfinite(preds).all():
        raise NonFiniteError("depth predictions contain non-finite values")
    return preds


def depth_from_rgb(maps: np.ndarray) -> np.ndarray:
    """Average the 3 channels of N x 3 x H x W decoded depth images."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4 or maps.shape[1] != 3:
        raise DimensionError(f"expected N x 3 x H x W, got {maps.shape}")
    return maps.mean(axis=1)


def merge_depth(preds, params: AffineParams) -> np.ndarray:
    """Pixelwise median of the aligned maps (mean of the two middle values for even N)."""
    preds = _check_depth(preds)
    if len(params) != preds.shape[0]:
        raise DimensionError(f"{len(params)} affine pairs for {preds.shape[0]} predictions")
    return np.median(params.apply(preds), axis=0)


def pairwise_term(aligned: np.ndarray) -> float:
    n = aligned.shape[0]
    if n < 2:
        return 0.0
    i, j = np.triu_indices(n, 1)
    diff = aligned[i] - aligned[j]
    return float(np.sqrt((diff * diff).sum() / i.size))


def range_term(merged: np.ndarray) -> float:
    return abs(float(merged.min())) + abs(1.0 - float(merged.max()))


def depth_objective(preds, params: AffineParams, lam: float) -> float:
    if lam < 0:
        raise ValueError(f"regulariser weight must be non-negative, got {lam}")
    preds = _check_depth(preds)
    aligned = params.apply(preds)
    return pairwise_term(aligned) + lam * range_term(np.median(aligned, axis=0))


@dataclass
class DepthAlignment:
    params: AffineParams
    objective: float
    trace: list[float] = field(default_factory=list)
    iterations: int = 0


class _Coordinates:
    """Orthonormal reparametrisation of (s, t) used for the search.

    Each prediction is standardised, so d'_i = a_i z_i + c_i.  The vectors
    a and c are expressed in a Helmert basis: coordinate 0 is the common
    part, the rest are orthonormal deviations.  When the predictions agree
    up to affine maps, the valley of the pairwise term is the span of the
    two common coordinates.
    """

    def __init__(self, preds: np.ndarray):
        n = preds.shape[0]
        flat = preds.reshape(n, -1)
        self.n = n
        self.mean = flat.mean(axis=1)
        std = flat.std(axis=1)
        self.std = np.where(std > 0, std, 1.0)
        self.basis = helmert(n, full=True)
        self.gauge = np.array([0, n])

    def encode(self, params: AffineParams) -> np.ndarray:
        a = params.scales * self.std
        c = params.offsets + params.scales * self.mean
        return np.concatenate([self.basis @ a, self.basis @ c])

    def decode(self, u: np.ndarray) -> AffineParams:
        a = self.basis.T @ u[:self.n]
        c = self.basis.T @ u[self.n:]
        return AffineParams(a / self.std, c - a * self.mean / self.std)


def align_depth(preds, lam: float = 0.1, iters: int = 2000) -> DepthAlignment:
    """Nelder-Mead search for per-prediction scales and offsets.

    Starts at s = 1, t = 0.  The iteration budget is spent in short
    restarted runs that alternate between all 2N coordinates and the two
    common (gauge) coordinates; only improving runs are accepted, so the
    recorded best-so-far objective never increases.
    """
    preds = _check_depth(preds)
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if lam < 0:
        raise ValueError(f"regulariser weight must be non-negative, got {lam}")
    init = AffineParams.identity(preds.shape[0])
    coords = _Coordinates(preds)

    def objective(u: np.ndarray) -> float:
        value = depth_objective(preds, coords.decode(u), lam)
        if not np.isfinite(value):
            raise NonFiniteError("depth objective became non-finite")
        return value

    best_params, best = init, depth_objective(preds, init, lam)
    u = coords.encode(init)
    trace = [best]
    blocks = [np.arange(2 * coords.n), coords.gauge]
    steps = [0.1 * max(np.abs(u).max(), 1e-3)] * 2
    used = 0
    k = 0
    while used < iters:
        b = k % 2
        k += 1
        idx = blocks[b]

        def sub(v, idx=idx):
            w = u.copy()
            w[idx] = v
            return objective(w)

        def on_iter(intermediate_result):
            trace.append(min(best, trace[-1], float(intermediate_result.fun)))

        start = u[idx]
        simplex = np.vstack([start] + [start + steps[b] * e for e in np.eye(idx.size)])
        res = minimize(sub, start, method="Nelder-Mead", callback=on_iter,
                       options=dict(maxiter=min(NM_CHUNK, iters - used), initial_simplex=simplex,
                                    xatol=0.0, fatol=0.0, adaptive=True))
        used += max(int(res.nit), 1)
        if res.fun < best:
            moved = np.abs(res.x - start).max()
            u = u.copy()
            u[idx] = res.x
            best, best_params = float(res.fun), coords.decode(u)
            steps[b] = max(moved, 1e-14)
        else:
            steps[b] = max(0.25 * steps[b], 1e-14)
    return DepthAlignment(best_params, best, trace, used)


# normals ---------------------------------------------------------------------------

def _check_normals(preds, tol: float = 1e-6) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 4 or preds.shape[-1] != 3 or preds.shape[0] < 1:
        raise DimensionError(f"normal predictions must be N x H x W x 3, got {preds.shape}")
    norms = np.linalg.norm(preds, axis=-1)
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError("normal predictions must be unit vectors")
    return preds


def normal_selection(preds) -> np.ndarray:
    """Index of the chosen prediction per pixel (H x W)."""
    preds = _check_normals(preds)
    mean = preds.mean(axis=0)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    unit = mean / np.where(norm < DEGENERATE_MEAN_NORM, 1.0, norm)
    cosine = np.einsum("nhwc,hwc->nhw", preds, unit)
    # argmax returns the first maximum, so ties go to the lowest index
    choice = np.argmax(cosine, axis=0)
    choice[norm[..., 0] < DEGENERATE_MEAN_NORM] = 0
    return choice


def ensemble_normals(preds) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    choice = normal_selection(preds)
    return np.take_along_axis(preds, choice[None, ..., None], axis=0)[0]


# lighting ----------------------------------------------------------------------------

def _shading(A: np.ndarray, l: np.ndarray) -> np.ndarray:
    """Broadcast single-channel shading over the colour channels of A."""
    if l.shape == A.shape:
        return l
    if A.ndim == 3 and l.shape in (A.shape[:2], A.shape[:2] + (1,)):
        return l.reshape(A.shape[:2] + (1,))
    raise DimensionError(f"shading {l.shape} does not fit albedo {A.shape}")


def lighting_residual(I, A, l) -> np.ndarray:
    """Non-diffuse residual R = I - A * l."""
    I, A, l = (np.asarray(x, dtype=np.float64) for x in (I, A, l))
    if I.shape != A.shape:
        raise DimensionError(f"image {I.shape} and albedo {A.shape} differ in shape")
    return I - A * _shading(A, l)


def reconstruct(A, l, R) -> np.ndarray:
    A, l, R = (np.asarray(x, dtype=np.float64) for x in (A, l, R))
    if R.shape != A.shape:
        raise DimensionError(f"residual {R.shape} and albedo {A.shape} differ in shape")
    return A * _shading(A, l) + R


@dataclass
class LightingDecomposition:
    I: np.ndarray
    A: np.ndarray
    l: np.ndarray
    R: np.ndarray

    @classmethod
    def from_image(cls, I, A, l) -> "LightingDecomposition":
        return cls(np.asarray(I, float), np.asarray(A, float), np.asarray(l, float), lighting_residual(I, A, l))
