import numpy as np
import pytest

from shaderflow import tensor as T
from shaderflow.errors import ConfigError, DimensionError, TrainingDivergedError
from shaderflow.flow import cfm_loss
from shaderflow.model import (DiT, Internals, LatentImage, ModelConfig, ToyDataset, config_to_text,
                              load_checkpoint, make_synthetic_dataset, model_config_from_text, patchify,
                              save_checkpoint, smoothed, synthetic_run, timestep_embedding, toy_target, train,
                              unpatchify)
from shaderflow.rng import Xoshiro256
from shaderflow.tensor import Tensor

from conftest import make_model, randomize_adapters


# config and latents -------------------------------------------------------------------

def test_config_defaults():
    cfg = ModelConfig()
    assert (cfg.d_model, cfg.n_blocks, cfg.n_heads, cfg.lora_rank, cfg.patch_size, cfg.grid) == (16, 2, 1, 4, 1, 8)
    assert cfg.learning_rate == 1e-4 and cfg.mlp_mult == 4
    assert cfg.tokens_per_grid == 64


@pytest.mark.parametrize("kw", [dict(d_model=7), dict(lora_rank=9), dict(grid=6, patch_size=4),
                                dict(n_heads=3), dict(n_blocks=0)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_latent_validation():
    LatentImage(np.zeros((1, 2, 2)), "depth")
    with pytest.raises(ValueError):
        LatentImage(np.full((1, 2, 2), 1.5), "depth")
    with pytest.raises(ValueError):
        LatentImage(np.full((1, 2, 2), -0.1), "lighting")
    with pytest.raises(ValueError):
        LatentImage(np.ones((3, 2, 2)), "normal")
    with pytest.raises(DimensionError):
        LatentImage(np.zeros((2, 2, 2)), "material")
    with pytest.raises(ConfigError):
        LatentImage(np.zeros((1, 2, 2)), "albedo")


def test_patchify_round_trip():
    x = Xoshiro256(0).normals((3, 4, 6))
    for p in (1, 2):
        tokens = patchify(x, p)
        assert tokens.shape == (4 * 6 // p**2, 3 * p * p)
        assert np.array_equal(unpatchify(tokens, 3, 4, 6, p), x)


def test_patch_order_is_row_major():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert np.array_equal(patchify(x, 2)[1], [2.0, 3.0, 6.0, 7.0])


def test_toy_target_uses_every_condition():
    rng = Xoshiro256(1)
    material = rng.uniforms((3, 2, 2))
    depth = np.array([[[0.2, 0.8], [0.4, 0.6]]])
    normal = np.zeros((3, 2, 2))
    normal[2] = 1.0
    lighting = np.full((1, 2, 2), 0.5)
    out = toy_target(material, depth, normal, lighting)
    colour = material.reshape(3, -1).mean(axis=1)
    assert np.allclose(out[:, 0, 0], colour * 0.5)
    assert not out[:, 0, 1].any() and not out[:, 1, 1].any()
    normal[2], normal[0] = 0.0, 1.0
    assert np.allclose(toy_target(material, depth, normal, lighting)[:, 0, 0], colour * 0.25)


def test_synthetic_dataset_is_seeded():
    a = make_synthetic_dataset(3, 8, 5)
    b = make_synthetic_dataset(3, 8, 5)
    assert np.array_equal(a[2].target.data, b[2].target.data)
    assert len(a) == 3 and a[0].cond.present() == ("depth", "normal", "lighting")


def test_dataset_grid_agreement():
    s4 = make_synthetic_dataset(1, 4, 0)[0]
    s8 = make_synthetic_dataset(1, 8, 0)[0]
    with pytest.raises(DimensionError):
        ToyDataset([s4, s8])


def test_timestep_embedding_shape():
    e = timestep_embedding(0.3, 8)
    assert e.shape == (8,)
    assert np.allclose(e[:4] ** 2 + e[4:] ** 2, 1.0)


# tokenize / forward -----------------------------------------------------------------

def test_tokenize_counts():
    model = DiT(ModelConfig(), Xoshiro256(0))
    cond = make_synthetic_dataset(1, 8, 0)[0].cond
    x = Tensor.zeros(*model.noise_shape())
    Z, layout, pos = model.tokenize(x, cond)
    assert Z.shape == (320, 16) and layout.total == 320
    Z, layout, pos = model.tokenize(x, cond.drop("lighting"))
    assert layout.cond_lengths == (64, 64, 0) and layout.total == 256
    assert list(pos[:3]) == [0, 1, 2] and list(pos[64:67]) == [0, 1, 2]


def test_tokenize_one_by_one_grid():
    model = DiT(ModelConfig(d_model=4, lora_rank=1, grid=1), Xoshiro256(0))
    cond = make_synthetic_dataset(1, 1, 0)[0].cond
    _, layout, _ = model.tokenize(Tensor.zeros(1, 3), cond)
    assert layout.sizes == (1, 1, 1, 1, 1)


def test_grid_mismatch_names_role():
    model = DiT(ModelConfig(grid=4, d_model=8, lora_rank=2), Xoshiro256(0))
    cond = make_synthetic_dataset(1, 4, 0)[0].cond
    cond.depth = LatentImage(np.zeros((1, 8, 8)), "depth")
    with pytest.raises(DimensionError, match="depth"):
        model.tokenize(Tensor.zeros(*model.noise_shape()), cond)


def test_zero_head_gives_zero_velocity(cond):
    model = DiT(ModelConfig(grid=4, d_model=8, lora_rank=2), Xoshiro256(0))
    v = model(Tensor(Xoshiro256(1).normals(model.noise_shape())), 0.4, cond)
    assert not v.data.any()


def test_condition_rows_ignore_t(model, cond):
    x = Tensor(Xoshiro256(2).normals(model.noise_shape()))
    Z, layout, pos = model.tokenize(x, cond)
    runs = []
    for t in (0.1, 0.9):
        internals = Internals()
        model.forward(Z, layout, t, pos, internals)
        runs.append(internals)
    lo = layout.n_image
    assert np.array_equal(runs[0].hidden.data[lo:], runs[1].hidden.data[lo:])
    assert not np.array_equal(runs[0].hidden.data[:lo], runs[1].hidden.data[:lo])
    for (k0, v0), (k1, v1) in zip(runs[0].kv, runs[1].kv):
        assert np.array_equal(k0.data[lo:], k1.data[lo:]) and np.array_equal(v0.data[lo:], v1.data[lo:])


def test_depth_perturbation_changes_output(model, cond):
    x = Tensor(Xoshiro256(3).normals(model.noise_shape()))
    base = model(x, 0.5, cond).data
    cond.depth = LatentImage(np.clip(cond.depth.data + 0.2, 0, 1), "depth")
    assert np.abs(model(x, 0.5, cond).data - base).max() > 1e-6


def test_forward_rejects_bad_t(model, cond):
    with pytest.raises(ValueError):
        model(Tensor.zeros(*model.noise_shape()), 1.2, cond)


def test_multi_head_forward(cond):
    model = make_model(4, n_heads=2)
    assert model(Tensor.zeros(*model.noise_shape()), 0.5, cond).shape == model.noise_shape()


def test_parameter_partition(model):
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert len(model.adapter_parameters()) + len(model.base_parameters()) == len(names)
    assert len(model.adapter_parameters()) == model.cfg.n_blocks * 3 * 3 * 2


def test_set_strength_reaches_every_block(model):
    model.set_strength("depth", 0.25)
    assert all(blk.adapters.strengths["depth"] == 0.25 for blk in model.blocks)


# gradients ----------------------------------------------------------------------------

def test_full_model_gradients_match_finite_differences():
    rng = Xoshiro256(5)
    model = randomize_adapters(DiT(ModelConfig(d_model=4, n_blocks=1, lora_rank=2, grid=2), rng, zero_head=False),
                               rng)
    sample = make_synthetic_dataset(1, 2, 5)[0]
    x0 = Tensor(patchify(sample.target.data, 1))
    eps = Tensor(rng.normals(x0.shape))

    def loss():
        return cfm_loss(model, x0, sample.cond, Xoshiro256(0), t=0.37, eps=eps)

    T.backward(loss())
    worst = 0.0
    for name, p in model.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        original = p.data

        def f(v, p=p):
            p.data = v.data
            return loss()

        numeric = T.finite_diff_grad(f, Tensor(original), 1e-4).data
        p.data = original
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
        worst = max(worst, np.abs(analytic - numeric).max() / scale)
    assert worst < 1e-3


# training -------------------------------------------------------------------------------

def small_run(seed=0, n=4):
    return synthetic_run(ModelConfig(d_model=8, lora_rank=2, grid=4), seed, n)


def test_zero_steps_leaves_state():
    model, ds, rng = small_run()
    before = model.state_dict()
    result = train(model, ds, 0, rng)
    assert result.trace == []
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())


def test_zero_learning_rate_changes_nothing():
    model, ds, rng = small_run()
    before = model.state_dict()
    trace = train(model, ds, 5, rng, lr=0.0).trace
    assert len(trace) == 5
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())


def test_training_is_deterministic():
    a = train(*small_run(3)[:2], 10, small_run(3)[2]).trace
    b = train(*small_run(3)[:2], 10, small_run(3)[2]).trace
    assert a == b


def test_frozen_base_keeps_base_bitwise():
    model, ds, rng = small_run(1)
    # a zero head passes no gradient back, so give the base a few full steps first
    train(model, ds, 10, rng, lr=1e-2)
    before = model.state_dict()
    train(model, ds, 10, rng, lr=1e-2, frozen_base=True)
    after = model.state_dict()
    for name in before:
        if ".lora." not in name:
            assert np.array_equal(before[name], after[name]), name
    assert any(not np.array_equal(before[n], after[n]) for n in before if ".lora." in n)


def test_divergence_aborts_with_trace():
    model, ds, rng = small_run(2)
    with pytest.raises(TrainingDivergedError) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            train(model, ds, 50, rng, lr=1e6)
    assert info.value.trace and info.value.trace[-1] > 1e6


def test_empty_dataset():
    model, _, rng = small_run()
    with pytest.raises(ValueError):
        train(model, ToyDataset([]), 1, rng)


def test_on_step_callback():
    model, ds, rng = small_run()
    seen = []
    train(model, ds, 3, rng, on_step=lambda i, v: seen.append(i))
    assert seen == [0, 1, 2]


def test_smoothed_trailing_mean():
    out = smoothed([1.0, 3.0, 5.0, 7.0], window=2)
    assert np.allclose(out, [1.0, 2.0, 4.0, 6.0])
    assert smoothed([]).size == 0


# checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, cond):
    model = make_model(6)
    model.set_strength("normal", 0.5)
    save_checkpoint(model, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.cfg == model.cfg and loaded.strengths == model.strengths
    for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data), n
    x = Tensor(Xoshiro256(7).normals(model.noise_shape()))
    assert np.array_equal(model(x, 0.3, cond).data, loaded(x, 0.3, cond).data)


def test_checkpoint_files(tmp_path):
    model = make_model(8)
    root = save_checkpoint(model, tmp_path)
    manifest = (root / "manifest.txt").read_text()
    assert "rank = 2" in manifest and "strength.lighting = 0.8" in manifest
    assert (root / "params" / "blocks.1.lora.normal.v.B.tensor").exists()


def test_config_text_round_trip():
    cfg = ModelConfig(d_model=8, lora_rank=3, learning_rate=0.5)
    assert model_config_from_text(config_to_text(cfg)) == cfg


def test_config_text_rejects_unknown_key():
    with pytest.raises(ConfigError):
        model_config_from_text("d_model = 8\nwidth = 3\n")
