"""Desk-scale multi-condition diffusion transformer.

Token sequence: [noise, material, depth, normal, lighting], each block a
patchified latent grid embedded by its own linear map.  The timestep is
added to noise tokens only, and conditions attend only within themselves,
so condition activations never depend on t.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .attention import BranchLayout, RopeFrequencies, apply_rope, build_scma_mask, mma, rope_angles
from .errors import ConfigError, DimensionError, NonFiniteError, TrainingDivergedError
from .flow import cfm_loss
from .lora import CONDITIONS, SLOTS, ConditionAdapterSet, ProjectionWeights, project_branches
from .rng import Xoshiro256
from .tensor import Tensor

ROLES = ("noise", "material") + CONDITIONS
ROLE_CHANNELS = {"noise": 3, "material": 3, "depth": 1, "normal": 3, "lighting": 1}
DIVERGENCE_LOSS = 1e6


@dataclass
class ModelConfig:
    d_model: int = 16
    n_blocks: int = 2
    n_heads: int = 1
    lora_rank: int = 4
    patch_size: int = 1
    grid: int = 8
    learning_rate: float = 1e-4
    mlp_mult: int = 4
    rope_base: float = 10000.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        if not 1 <= self.lora_rank <= self.d_model // 2:
            raise ConfigError(f"lora_rank must be in [1, d_model/2], got {self.lora_rank}")
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise ConfigError("d_model must split into heads of even width")
        if self.grid % self.patch_size:
            raise ConfigError(f"grid {self.grid} is not divisible by patch_size {self.patch_size}")
        if self.n_blocks < 1 or self.mlp_mult < 1:
            raise ConfigError("n_blocks and mlp_mult must be >= 1")

    @property
    def tokens_per_grid(self) -> int:
        return (self.grid // self.patch_size) ** 2

    def patch_dim(self, role: str) -> int:
        return ROLE_CHANNELS[role] * self.patch_size**2


# latents -----------------------------------------------------------------------

@dataclass
class LatentImage:
    """channels x H x W grid tagged with its role."""

    data: np.ndarray
    role: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.role not in ROLE_CHANNELS:
            raise ConfigError(f"unknown role {self.role!r}")
        if self.data.ndim != 3 or self.data.shape[0] != ROLE_CHANNELS[self.role]:
            raise DimensionError(
                f"{self.role} latent must be {ROLE_CHANNELS[self.role]} x H x W, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"{self.role} latent has non-finite values")
        if self.role == "depth" and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("depth values must lie in [0, 1]")
        if self.role == "lighting" and self.data.min() < 0:
            raise ValueError("lighting values must be non-negative")
        if self.role == "normal":
            norms = np.linalg.norm(self.data, axis=0)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("normal vectors must be unit length")

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


def patchify(grid: np.ndarray, p: int) -> np.ndarray:
    """C x H x W -> (H/p * W/p) x (C p p), patches in row-major order."""
    c, h, w = grid.shape
    x = grid.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
    return x.reshape((h // p) * (w // p), c * p * p)


def unpatchify(tokens: np.ndarray, channels: int, h: int, w: int, p: int) -> np.ndarray:
    x = tokens.reshape(h // p, w // p, channels, p, p).transpose(2, 0, 3, 1, 4)
    return x.reshape(channels, h, w)


@dataclass
class Conditioning:
    """Material exemplar plus optional depth, normal and lighting maps."""

    material: LatentImage
    depth: LatentImage | None = None
    normal: LatentImage | None = None
    lighting: LatentImage | None = None

    def get(self, name: str) -> LatentImage | None:
        return getattr(self, name)

    def present(self) -> tuple[str, ...]:
        return tuple(c for c in CONDITIONS if self.get(c) is not None)

    def drop(self, name: str) -> "Conditioning":
        if name not in CONDITIONS:
            raise ConfigError(f"unknown condition {name!r}")
        kw = {c: self.get(c) for c in CONDITIONS}
        kw[name] = None
        return Conditioning(self.material, **kw)


@dataclass
class ToySample:
    cond: Conditioning
    target: LatentImage


@dataclass
class ToyDataset:
    samples: list[ToySample] = field(default_factory=list)

    def __post_init__(self):
        shapes = {s.target.hw for s in self.samples}
        shapes |= {lat.hw for s in self.samples for lat in (s.cond.material, *(s.cond.get(c) for c in CONDITIONS))
                   if lat is not None}
        if len(shapes) > 1:
            raise DimensionError(f"dataset members disagree on grid size: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ToySample:
        return self.samples[i]


def toy_target(material: np.ndarray, depth: np.ndarray, normal: np.ndarray, lighting: np.ndarray) -> np.ndarray:
    """Material mean colour painted where depth < 0.5, shaded by lighting and n_z."""
    colour = material.reshape(3, -1).mean(axis=1)[:, None, None]
    shade = lighting[0] * (0.5 + 0.5 * normal[2])
    return colour * shade[None] * (depth[0] < 0.5)[None]


def synthetic_sample(rng: Xoshiro256, grid: int) -> ToySample:
    ys, xs = np.mgrid[0:grid, 0:grid].astype(np.float64)
    colour = np.array([rng.uniform(0.2, 0.9) for _ in range(3)])
    material = np.clip(colour[:, None, None] + 0.05 * rng.normals((3, grid, grid)), 0.0, 1.0)

    cy, cx = rng.uniform(0.25, 0.75) * grid, rng.uniform(0.25, 0.75) * grid
    radius = rng.uniform(0.2, 0.35) * grid
    dist = np.hypot(ys - cy, xs - cx)
    depth = np.clip(dist / (2.0 * radius), 0.0, 1.0)

    gy, gx = np.gradient(depth) if grid > 1 else (np.zeros_like(depth), np.zeros_like(depth))
    normal = np.stack([-gx, -gy, np.full_like(depth, 0.25)])
    normal /= np.linalg.norm(normal, axis=0, keepdims=True)

    phi = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (xs * math.cos(phi) + ys * math.sin(phi)) / grid
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    lighting = rng.uniform(0.6, 1.0) * (0.5 + 0.5 * ramp)

    cond = Conditioning(
        LatentImage(material, "material"),
        LatentImage(depth[None], "depth"),
        LatentImage(normal, "normal"),
        LatentImage(lighting[None], "lighting"),
    )
    target = toy_target(material, depth[None], normal, lighting[None])
    return ToySample(cond, LatentImage(target, "noise"))


def make_synthetic_dataset(n: int, grid: int, seed: int) -> ToyDataset:
    rng = Xoshiro256(seed)
    return ToyDataset([synthetic_sample(rng, grid) for _ in range(n)])


# transformer -------------------------------------------------------------------

def timestep_embedding(t: float, d: int, max_period: float = 10000.0) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = 1000.0 * t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _uniform(rng: Xoshiro256, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniforms(shape, -bound, bound), requires_grad=True)


@dataclass
class Block:
    proj: ProjectionWeights
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    adapters: ConditionAdapterSet

    def named_base(self) -> Iterator[tuple[str, Tensor]]:
        yield from (("wq", self.proj.wq), ("wk", self.proj.wk), ("wv", self.proj.wv), ("wo", self.wo),
                    ("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))


@dataclass
class Internals:
    """Per-block K/V (post-rope K) and the final hidden state of a forward pass."""

    kv: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    hidden: Tensor | None = None


class DiT:
    """Multi-branch transformer predicting the flow velocity of the noise block."""

    def __init__(self, cfg: ModelConfig, rng: Xoshiro256, zero_head: bool = True):
        self.cfg = cfg
        d = cfg.d_model
        hidden = cfg.mlp_mult * d
        self.embed = {role: (_uniform(rng, (d, cfg.patch_dim(role)), cfg.patch_dim(role)),
                             Tensor(np.zeros(d), requires_grad=True)) for role in ROLES}
        self.blocks = []
        for _ in range(cfg.n_blocks):
            proj = ProjectionWeights(*(_uniform(rng, (d, d), d) for _ in range(3)))
            self.blocks.append(Block(
                proj=proj,
                wo=_uniform(rng, (d, d), d),
                w1=_uniform(rng, (hidden, d), d),
                b1=Tensor(np.zeros(hidden), requires_grad=True),
                w2=_uniform(rng, (d, hidden), hidden),
                b2=Tensor(np.zeros(d), requires_grad=True),
                adapters=ConditionAdapterSet.init(d, cfg.lora_rank, rng),
            ))
        out_dim = cfg.patch_dim("noise")
        head_w = np.zeros((out_dim, d)) if zero_head else rng.uniforms((out_dim, d), -d**-0.5, d**-0.5)
        self.head_w = Tensor(head_w, requires_grad=True)
        self.head_b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.freqs = RopeFrequencies(d // cfg.n_heads, cfg.rope_base)
        self._angle_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # parameters ----------------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for role in ROLES:
            w, b = self.embed[role]
            yield f"embed.{role}.w", w
            yield f"embed.{role}.b", b
        for i, blk in enumerate(self.blocks):
            for name, p in blk.named_base():
                yield f"blocks.{i}.{name}", p
            for c in CONDITIONS:
                for s in SLOTS:
                    a = blk.adapters[c][s]
                    yield f"blocks.{i}.lora.{c}.{s}.A", a.A
                    yield f"blocks.{i}.lora.{c}.{s}.B", a.B
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def adapter_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if ".lora." in name]

    def base_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if ".lora." not in name]

    @property
    def strengths(self) -> dict[str, float]:
        return self.blocks[0].adapters.strengths

    def set_strength(self, condition: str, s: float) -> None:
        for blk in self.blocks:
            blk.adapters = blk.adapters.set_strength(condition, s)

    # pieces shared with the cached path ------------------------------------------
    def embed_role(self, role: str, patches: np.ndarray | Tensor) -> Tensor:
        w, b = self.embed[role]
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"{role} patches have width {x.shape[1]}, expected {w.shape[1]}")
        return T.add_rowvec(T.matmul(x, T.transpose(w)), b)

    def embed_noise(self, x: Tensor, t: float) -> Tensor:
        return T.add_rowvec(self.embed_role("noise", x), Tensor(timestep_embedding(t, self.cfg.d_model)))

    def condition_patches(self, cond: Conditioning, name: str) -> np.ndarray | None:
        lat = cond.get(name)
        if lat is None:
            return None
        self._check_grid(lat)
        return patchify(lat.data, self.cfg.patch_size)

    def _check_grid(self, lat: LatentImage) -> None:
        if lat.hw != (self.cfg.grid, self.cfg.grid):
            raise DimensionError(f"{lat.role} grid {lat.hw} does not match model grid {self.cfg.grid}")

    def angles(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Rotary cos/sin for grid positions 0..n-1."""
        if n not in self._angle_cache:
            self._angle_cache[n] = rope_angles(range(n), self.freqs)
        return self._angle_cache[n]

    def rope(self, x: Tensor, positions: np.ndarray) -> Tensor:
        cos, sin = self.angles(self.cfg.tokens_per_grid)
        angles = (cos[positions], sin[positions])
        if self.cfg.n_heads == 1:
            return apply_rope(x, positions, self.freqs, angles)
        dh = self.cfg.d_model // self.cfg.n_heads
        heads = [apply_rope(T.slice_cols(x, h * dh, (h + 1) * dh), positions, self.freqs, angles)
                 for h in range(self.cfg.n_heads)]
        return T.concat_cols(heads)

    def attn_out(self, blk: Block, X: Tensor, attn: Tensor) -> Tensor:
        return T.add(X, T.matmul(attn, T.transpose(blk.wo)))

    def mlp(self, blk: Block, X: Tensor) -> Tensor:
        H = T.layer_norm(X, self.cfg.ln_eps)
        inner = T.gelu(T.add_rowvec(T.matmul(H, T.transpose(blk.w1)), blk.b1))
        return T.add(X, T.add_rowvec(T.matmul(inner, T.transpose(blk.w2)), blk.b2))

    def head(self, X_noise: Tensor) -> Tensor:
        H = T.layer_norm(X_noise, self.cfg.ln_eps)
        return T.add_rowvec(T.matmul(H, T.transpose(self.head_w)), self.head_b)

    # full forward ------------------------------------------------------------------
    def tokenize(self, x: Tensor, cond: Conditioning) -> tuple[Tensor, BranchLayout, np.ndarray]:
        """Embed [noise, material, depth, normal, lighting]; absent conditions get 0 tokens.

        ``x`` is the noise block in patch space (n_noise x patch_dim).
        Returns the token matrix without the timestep, the layout and
        per-token grid positions.
        """
        n = self.cfg.tokens_per_grid
        if x.shape != (n, self.cfg.patch_dim("noise")):
            raise DimensionError(f"noise tokens must be {(n, self.cfg.patch_dim('noise'))}, got {x.shape}")
        self._check_grid(cond.material)
        parts = [self.embed_role("noise", x),
                 self.embed_role("material", patchify(cond.material.data, self.cfg.patch_size))]
        lengths = []
        for name in CONDITIONS:
            patches = self.condition_patches(cond, name)
            if patches is None:
                lengths.append(0)
                continue
            parts.append(self.embed_role(name, patches))
            lengths.append(n)
        layout = BranchLayout(n, n, tuple(lengths))
        positions = np.tile(np.arange(n), len(parts))
        return T.concat_rows(parts), layout, positions

    def forward(self, Z: Tensor, layout: BranchLayout, t: float, positions: np.ndarray,
                internals: Internals | None = None) -> Tensor:
        """Velocity for the noise block from tokenized inputs."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        temb = np.zeros((layout.total, self.cfg.d_model))
        temb[:layout.n_noise] = timestep_embedding(t, self.cfg.d_model)
        X = T.add(Z, Tensor(temb))
        mask = build_scma_mask(layout)
        for blk in self.blocks:
            H = T.layer_norm(X, self.cfg.ln_eps)
            Q, K, V = project_branches(H, layout, blk.proj, blk.adapters)
            Q, K = self.rope(Q, positions), self.rope(K, positions)
            if internals is not None:
                internals.kv.append((K, V))
            X = self.attn_out(blk, X, mma(Q, K, V, mask, self.cfg.n_heads))
            X = self.mlp(blk, X)
        if internals is not None:
            internals.hidden = X
        return self.head(T.slice_rows(X, 0, layout.n_noise))

    def __call__(self, x: Tensor, t: float, cond: Conditioning) -> Tensor:
        Z, layout, positions = self.tokenize(x, cond)
        return self.forward(Z, layout, t, positions)

    def noise_shape(self) -> tuple[int, int]:
        return self.cfg.tokens_per_grid, self.cfg.patch_dim("noise")

    def to_image(self, tokens: Tensor | np.ndarray) -> np.ndarray:
        data = tokens.data if isinstance(tokens, Tensor) else tokens
        g = self.cfg.grid
        return unpatchify(data, ROLE_CHANNELS["noise"], g, g, self.cfg.patch_size)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {arr.shape}")
            new = arr.copy()
            new.flags.writeable = False
            p.data = new


# training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DiT
    trace: list[float]


def sgd_step(params: list[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            new = p.data - lr * p.grad
            new.flags.writeable = False
            p.data = new
        p.grad = None


def train(model: DiT, dataset: ToyDataset, steps: int, rng: Xoshiro256, *,
          lr: float | None = None, frozen_base: bool = False, reduction: str = "sum",
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Plain SGD with batch size 1 on the flow-matching loss.

    With ``frozen_base`` only the LoRA adapters are updated.  The loss is
    the per-sample squared norm of the velocity residual unless
    ``reduction="mean"``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    lr = model.cfg.learning_rate if lr is None else lr
    trainable = model.adapter_parameters() if frozen_base else model.parameters()
    frozen = [] if not frozen_base else model.base_parameters()
    targets = [Tensor(patchify(s.target.data, model.cfg.patch_size)) for s in dataset.samples]
    trace: list[float] = []
    for step in range(steps):
        i = rng.integers(len(dataset))
        loss = cfm_loss(model, targets[i], dataset[i].cond, rng, reduction=reduction)
        value = loss.item()
        trace.append(value)
        if value > DIVERGENCE_LOSS:
            raise TrainingDivergedError(step, value, trace)
        T.backward(loss)
        sgd_step(trainable, lr)
        for p in frozen:
            p.grad = None
        if on_step is not None:
            on_step(step, value)
    return TrainResult(model, trace)


def synthetic_run(cfg: ModelConfig, seed: int, n_samples: int = 16) -> tuple[DiT, ToyDataset, Xoshiro256]:
    """Model, synthetic dataset and training generator, all derived from one seed.

    The dataset uses ``seed`` directly (so ``make_synthetic_dataset(n, grid,
    seed)`` reproduces it); model init and training draw from two children
    spawned off a generator seeded with ``seed + 1``.
    """
    dataset = make_synthetic_dataset(n_samples, cfg.grid, seed)
    root = Xoshiro256((seed + 1) % 2**64)
    model = DiT(cfg, root.spawn())
    return model, dataset, root.spawn()


def smoothed(trace: list[float], window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    arr = np.asarray(trace, dtype=np.float64)
    if arr.size == 0:
        return arr
    c = np.cumsum(np.concatenate([[0.0], arr]))
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# checkpoints ---------------------------------------------------------------------

def config_to_text(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def model_config_from_text(text: str) -> ModelConfig:
    raw = parse_key_values(text)
    types = {f.name: f.type for f in fields(ModelConfig)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    kw = {k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in raw.items()}
    return ModelConfig(**kw)


def save_checkpoint(model: DiT, directory: str | Path) -> Path:
    """Write config.txt, manifest.txt and one tensor file per parameter."""
    root = Path(directory)
    (root / "params").mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(config_to_text(model.cfg), encoding="utf-8")
    lines = [f"rank = {model.cfg.lora_rank}"]
    lines += [f"strength.{c} = {s!r}" for c, s in model.strengths.items()]
    for name, p in model.named_parameters():
        rel = f"params/{name}.tensor"
        T.save_tensor(p, root / rel)
        lines.append(f"param.{name} = {rel}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def load_checkpoint(directory: str | Path) -> DiT:
    root = Path(directory)
    cfg = model_config_from_text((root / "config.txt").read_text(encoding="utf-8"))
    manifest = parse_key_values((root / "manifest.txt").read_text(encoding="utf-8"))
    if int(manifest["rank"]) != cfg.lora_rank:
        raise ConfigError("manifest rank disagrees with config")
    model = DiT(cfg, Xoshiro256(0))
    state = {k[len("param."):]: T.load_tensor(root / v).data
             for k, v in manifest.items() if k.startswith("param.")}
    model.load_state_dict(state)
    for c in CONDITIONS:
        model.set_strength(c, float(manifest[f"strength.{c}"]))
    return model
