"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
(non-finite values, divergence), 4 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ensemble, imageio, kvcache
from .config import RunConfig, describe_keys
from .errors import ConfigError, FullyMaskedRowError, NonFiniteError, ShaderFlowError, TrainingDivergedError
from .flow import initial_noise
from .lora import CONDITIONS
from .model import (ROLE_CHANNELS, Conditioning, DiT, LatentImage, ToyDataset, ToySample, load_checkpoint,
                    make_synthetic_dataset, save_checkpoint, synthetic_run, train)
from .rng import Xoshiro256
from .verify import list_checks, run_checks

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
MAP_SUFFIXES = (".tensor", ".pgm", ".ppm")

log = logging.getLogger("shaderflow")


class UsageError(Exception):
    pass


# config plumbing ----------------------------------------------------------------

def _run_config(args, flags: dict[str, object]) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        sets[key] = value
    return cfg.updated(sets).updated(flags)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


# map I/O ----------------------------------------------------------------------------

def _to_chw(arr: np.ndarray, channels: int) -> np.ndarray:
    """Accept H x W, C x H x W or H x W x C arrays."""
    if arr.ndim == 2 and channels == 1:
        return arr[None]
    if arr.ndim == 3 and arr.shape[0] == channels:
        return arr
    if arr.ndim == 3 and arr.shape[2] == channels:
        return arr.transpose(2, 0, 1)
    raise ConfigError(f"cannot read a {channels}-channel map from an array of shape {arr.shape}")


def _unit(v: np.ndarray, axis: int) -> np.ndarray:
    """Renormalise decoded normals, which quantisation leaves slightly off unit length."""
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if (norm == 0).any():
        raise ConfigError("normal map contains zero vectors")
    return v / norm


def read_latent(path: str | Path, role: str) -> LatentImage:
    arr = imageio.read_map(path, normals=role == "normal")
    data = _to_chw(arr, ROLE_CHANNELS[role])
    if role == "normal":
        data = _unit(data, 0)
    return LatentImage(data, role)


def write_image(path: str | Path, chw: np.ndarray) -> None:
    path = Path(path)
    imageio.write_map(path, chw if path.suffix == ".tensor" else chw.transpose(1, 2, 0))


def _map_files(directory: str | Path) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix in MAP_SUFFIXES)
    if not files:
        raise ConfigError(f"no {'/'.join(MAP_SUFFIXES)} files in {root}")
    return files


def _find(directory: Path, stem: str) -> Path | None:
    for suffix in MAP_SUFFIXES:
        if (directory / f"{stem}{suffix}").exists():
            return directory / f"{stem}{suffix}"
    return None


def load_dataset_dir(directory: str | Path) -> ToyDataset:
    """One subdirectory per sample holding material, depth, normal, lighting and target maps."""
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    samples = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = {name: _find(sub, name) for name in ("material", *CONDITIONS, "target")}
        missing = [k for k, v in paths.items() if v is None]
        if missing:
            raise ConfigError(f"{sub}: missing {missing}")
        cond = Conditioning(read_latent(paths["material"], "material"),
                            *(read_latent(paths[c], c) for c in CONDITIONS))
        samples.append(ToySample(cond, read_latent(paths["target"], "noise")))
    if not samples:
        raise ConfigError(f"dataset directory {root} has no samples")
    return ToyDataset(samples)


# commands -------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _run_config(args, {"train_steps": args.steps, "seed": args.seed, "learning_rate": args.lr,
                             "frozen_base": True if args.frozen_base else None})
    if not args.synthetic and not args.dataset:
        raise UsageError("train needs --synthetic or --dataset DIR")
    model, dataset, rng = synthetic_run(cfg.model_config(), cfg.seed, cfg.dataset_size)
    if args.init:
        model = load_checkpoint(args.init)
    if args.dataset:
        dataset = load_dataset_dir(args.dataset)
    out = Path(args.out or cfg.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    trace: list[float] = []
    try:
        trace = train(model, dataset, cfg.train_steps, rng, lr=cfg.learning_rate,
                      frozen_base=cfg.frozen_base).trace
    except TrainingDivergedError as exc:
        trace = exc.trace
        raise
    finally:
        (out / "loss.csv").write_text("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace)),
                                      encoding="utf-8")
    save_checkpoint(model, out)
    print(f"checkpoint={out} steps={len(trace)}")
    return EXIT_OK


def _conditioning(args, cfg: RunConfig) -> Conditioning:
    if args.synthetic:
        cond = make_synthetic_dataset(args.index + 1, cfg.grid, cfg.seed)[args.index].cond
    else:
        if not args.material:
            raise UsageError("sample needs --material (or --synthetic)")
        given = {c: getattr(args, c) for c in CONDITIONS}
        missing = [c for c, p in given.items() if p is None and c not in args.drop_condition]
        if missing:
            raise UsageError(f"missing condition inputs {missing}; pass them or use --drop-condition")
        cond = Conditioning(read_latent(args.material, "material"),
                            *(read_latent(p, c) if p else None for c, p in given.items()))
    for name in args.drop_condition:
        cond = cond.drop(name)
    return cond


def cmd_sample(args) -> int:
    strengths = {f"strength_{c}": getattr(args, f"strength_{c}") for c in CONDITIONS}
    cfg = _run_config(args, {"steps": args.steps, "seed": args.seed, "cache": args.cache,
                             "cache_material": True if args.cache_material else None, **strengths})
    model = load_checkpoint(args.checkpoint)
    for c, s in cfg.strengths().items():
        model.set_strength(c, s)
    if args.synthetic and cfg.grid != model.cfg.grid:
        cfg = cfg.updated({"grid": model.cfg.grid})
    cond = _conditioning(args, cfg)
    flow_cfg = cfg.flow_config()
    noise = initial_noise(model.noise_shape(), flow_cfg)
    x = kvcache.sample(model, cond, flow_cfg, cache=cfg.cache, noise=noise, cache_material=cfg.cache_material)
    write_image(args.out, model.to_image(x))
    print(f"wrote {args.out} steps={flow_cfg.num_steps} cache={'on' if cfg.cache else 'off'} "
          f"conditions={','.join(cond.present()) or 'none'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.list:
        print("\n".join(list_checks()))
        return EXIT_OK
    names = [n for item in args.only or [] for n in item.split(",") if n]
    try:
        results = run_checks(names or None)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_bench_kv(args) -> int:
    cfg = _run_config(args, {"steps": args.steps, "seed": args.seed, "bench_runs": args.runs,
                             "cache_material": True if args.cache_material else None})
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = DiT(cfg.model_config(), Xoshiro256(cfg.seed), zero_head=False)
    cond = make_synthetic_dataset(1, model.cfg.grid, cfg.seed)[0].cond
    record = kvcache.bench_kv(model, cond, cfg.steps, cfg.bench_runs, cfg.seed, cfg.cache_material)
    print(record.line())
    return EXIT_OK


def _read_depth_dir(directory) -> np.ndarray:
    maps = []
    for path in _map_files(directory):
        arr = imageio.read_map(path)
        if arr.ndim == 3:
            arr = ensemble.depth_from_rgb(_to_chw(arr, 3)[None])[0]
        maps.append(arr)
    if len({m.shape for m in maps}) > 1:
        raise ConfigError("depth predictions differ in size")
    return np.stack(maps)


def synthetic_depth_set(n: int, seed: int, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """A [0, 1]-spanning base map and n affinely distorted copies of it."""
    rng = Xoshiro256(seed)
    base = rng.uniforms((size, size))
    base = (base - base.min()) / (base.max() - base.min())
    preds = np.stack([(base - rng.uniform(-0.3, 0.3)) / rng.uniform(0.5, 2.0) for _ in range(n)])
    return base, preds


def cmd_depth_align(args) -> int:
    cfg = _run_config(args, {"lambda_reg": args.lam, "depth_iters": args.iters, "seed": args.seed,
                             "ensemble_size": args.n})
    if args.synthetic:
        _, preds = synthetic_depth_set(cfg.ensemble_size, cfg.seed)
    elif args.inputs:
        preds = _read_depth_dir(args.inputs)
    else:
        raise UsageError("depth-align needs --in DIR or --synthetic")
    result = ensemble.align_depth(preds, cfg.lambda_reg, cfg.depth_iters)
    merged = ensemble.merge_depth(preds, result.params)
    if args.out:
        imageio.write_map(args.out, merged)
    print(f"objective={result.objective!r} iterations={result.iterations}")
    for i, (s, t) in enumerate(zip(result.params.scales, result.params.offsets)):
        print(f"pred={i} scale={float(s)!r} offset={float(t)!r}")
    return EXIT_OK


def cmd_normal_ensemble(args) -> int:
    maps = []
    for path in _map_files(args.inputs):
        arr = imageio.read_map(path, normals=True)
        maps.append(_unit(_to_chw(arr, 3).transpose(1, 2, 0), -1))
    if len({m.shape for m in maps}) > 1:
        raise ConfigError("normal predictions differ in size")
    out = ensemble.ensemble_normals(np.stack(maps))
    imageio.write_map(args.out, out, normals=True)
    print(f"wrote {args.out} from {len(maps)} predictions")
    return EXIT_OK


def cmd_light_decompose(args) -> int:
    A = imageio.read_map(args.albedo)
    l = imageio.read_map(args.shading)
    if args.reconstruct:
        if not args.out:
            raise UsageError("--reconstruct needs --out")
        I = ensemble.reconstruct(A, l, imageio.read_map(args.residual))
        imageio.write_map(args.out, I)
        print(f"wrote {args.out}")
        return EXIT_OK
    if not args.image:
        raise UsageError("light-decompose needs --image (or --reconstruct)")
    R = ensemble.lighting_residual(imageio.read_map(args.image), A, l)
    imageio.write_map(args.residual, R)
    print(f"wrote {args.residual} max_abs_residual={float(np.abs(R).max())!r}")
    return EXIT_OK


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    keys = describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="shaderflow", description=__doc__, epilog=keys, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys, formatter_class=fmt)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=fn)
        return p

    p = command("train", cmd_train, "train the toy model and write a checkpoint plus loss.csv")
    p.add_argument("--synthetic", action="store_true", help="train on the seeded synthetic task")
    p.add_argument("--dataset", help="directory with one subdirectory per sample")
    p.add_argument("--steps", type=int, help="SGD steps (train_steps)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate (learning_rate)")
    p.add_argument("--frozen-base", action="store_true", help="update adapters only")
    p.add_argument("--init", metavar="CHECKPOINT", help="start from these weights instead of a fresh model")
    p.add_argument("--out", help="checkpoint directory (checkpoint)")

    p = command("sample", cmd_sample, "generate an image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="sample.tensor", help="output .tensor or .ppm (default sample.tensor)")
    p.add_argument("--steps", type=int, help="Euler steps (steps)")
    p.add_argument("--seed", type=int)
    p.add_argument("--cache", type=_on_off, metavar="on|off", help="condition K/V caching (cache)")
    p.add_argument("--cache-material", action="store_true", help="cache first-block material K/V too")
    for c in CONDITIONS:
        p.add_argument(f"--strength-{c}", type=float, help=f"{c} adapter strength (strength_{c})")
        p.add_argument(f"--{c}", help=f"{c} map file")
    p.add_argument("--material", help="material exemplar file")
    p.add_argument("--drop-condition", action="append", default=[], choices=CONDITIONS,
                   help="leave one condition out")
    p.add_argument("--synthetic", action="store_true", help="take inputs from a synthetic sample drawn with --seed")
    p.add_argument("--index", type=int, default=0, help="synthetic sample index (default 0)")

    p = command("verify", cmd_verify, "run the property checks")
    p.add_argument("--list", action="store_true", help="list checks and exit")
    p.add_argument("--only", action="append", metavar="NAME[,NAME]", help="run only these checks")

    p = command("bench-kv", cmd_bench_kv, "time cached against uncached sampling")
    p.add_argument("--steps", type=int)
    p.add_argument("--runs", type=int, help="timed runs per sampler (bench_runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="benchmark this checkpoint instead of a random model")
    p.add_argument("--cache-material", action="store_true")

    p = command("depth-align", cmd_depth_align, "align and merge depth predictions")
    p.add_argument("--in", dest="inputs", help="directory of depth maps (.pgm, .ppm or .tensor)")
    p.add_argument("--synthetic", action="store_true", help="use affinely distorted copies of a random map")
    p.add_argument("--n", type=int, help="synthetic ensemble size (ensemble_size)")
    p.add_argument("--lambda", dest="lam", type=float, help="regulariser weight (lambda_reg)")
    p.add_argument("--iters", type=int, help="Nelder-Mead iterations (depth_iters)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="merged depth output")

    p = command("normal-ensemble", cmd_normal_ensemble, "select per-pixel normals from several predictions")
    p.add_argument("--in", dest="inputs", required=True, help="directory of normal maps (.ppm or .tensor)")
    p.add_argument("--out", required=True)

    p = command("light-decompose", cmd_light_decompose, "split an image into albedo x shading + residual")
    p.add_argument("--image")
    p.add_argument("--albedo", required=True)
    p.add_argument("--shading", required=True)
    p.add_argument("--residual", default="residual.tensor", help="residual file (default residual.tensor)")
    p.add_argument("--reconstruct", action="store_true", help="rebuild the image from its parts")
    p.add_argument("--out", help="reconstructed image")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"shaderflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingDivergedError, FullyMaskedRowError) as exc:
        print(f"shaderflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShaderFlowError, ValueError) as exc:
        print(f"shaderflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE

