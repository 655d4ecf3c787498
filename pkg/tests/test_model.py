import numpy as np
import pytest

from brainage.errors import ChecksumError, ConfigError, ContractError, FormatVersionError, ShapeError
from brainage.model import (
    BrainAgeModel,
    ModelConfig,
    PseudoSample,
    Standardization,
    image_encode,
    load_checkpoint,
    model_forward,
    param_count,
    save_checkpoint,
    volume_encode,
)
from brainage.numcore import DeterministicRng, Tensor, reshape, sum_
from brainage.numcore.gradcheck import analytic_grads, numerical_grad, relative_error

TINY = ModelConfig(chunk_shape=(8, 8, 4), n_regions=5, encoder_channels=(4, 6), d_model=16, n_heads=2,
                   stem_queries=4, trunk_layers=1, ffn_hidden=24, volume_hidden=12, head_hidden=10)


def stats(r, age_mean=68.0, age_std=10.0):
    return Standardization(np.full(r, 100.0), np.full(r, 20.0), age_mean, age_std)


def tiny_model(seed=0):
    return BrainAgeModel(ModelConfig(**{**TINY.to_dict(), "chunk_shape": (8, 8, 4), "encoder_channels": (4, 6),
                                        "seed": seed}), stats(5))


def sample(rng, config=TINY):
    c = config.chunk_shape
    return PseudoSample(rng.uniform(size=c), rng.uniform(size=c), rng.uniform(size=c),
                        rng.uniform(60, 140, size=config.n_regions), float(rng.uniform(42, 95)))


def test_desk_defaults_and_token_counts():
    cfg = ModelConfig()
    assert cfg.chunk_shape == (32, 32, 8) and cfg.n_regions == 24
    assert cfg.token_grid == (4, 4, 1) and cfg.tokens_per_view == 16
    assert cfg.trunk_tokens == 49


def test_paper_scale_config_accepted():
    cfg = ModelConfig(chunk_shape=(128, 128, 30), n_regions=280)
    assert cfg.token_grid == (16, 16, 4)
    assert param_count(cfg) > param_count(ModelConfig())


def test_config_errors_list_fields():
    with pytest.raises(ConfigError) as e:
        ModelConfig(n_regions=0, d_model=10, n_heads=3)
    assert {"n_regions", "n_heads"} <= set(e.value.fields)
    with pytest.raises(ConfigError):
        ModelConfig(chunk_shape=(32, 32))


def test_param_count_matches_enumeration():
    for cfg in (ModelConfig(), TINY, ModelConfig(trunk_layers=3, encoder_channels=(4, 8, 16))):
        assert BrainAgeModel(cfg, stats(cfg.n_regions)).num_parameters() == param_count(cfg)


def test_encoder_is_shared_across_views():
    model = tiny_model()
    names = [n for n, _ in model.named_parameters() if n.startswith("encoder.")]
    assert len(names) == len(set(names)) == 3 * 2 + 2  # three convs and the projection, once each
    chunk = DeterministicRng(1).uniform(size=TINY.chunk_shape)
    model.encoder.convs[0].weight.data = model.encoder.convs[0].weight.data + 0.1
    out = model.encoder(np.stack([chunk, chunk, chunk]))
    assert np.array_equal(out.data[0], out.data[1]) and np.array_equal(out.data[1], out.data[2])


def test_image_encode_shape_and_zero_case():
    model = tiny_model()
    tokens = image_encode(model, np.zeros(TINY.chunk_shape))
    assert tokens.shape == (TINY.tokens_per_view, TINY.d_model)
    # all biases are initialised to zero and GELU(0) = 0
    assert not tokens.data.any()
    with pytest.raises(ConfigError):
        image_encode(model, np.zeros((8, 8, 5)))


def test_image_encode_gradient_matches_finite_differences():
    model = tiny_model()
    x = Tensor(DeterministicRng(2).uniform(size=TINY.chunk_shape))
    fn = lambda: sum_(image_encode(model, x))  # noqa: E731
    (g,) = analytic_grads(fn, [x])
    idx = DeterministicRng(3).choice(x.size, 20, replace=False)
    assert relative_error(g, numerical_grad(fn, x, indices=idx)) < 1e-5


def test_volume_encode():
    model = tiny_model()
    assert volume_encode(model, np.full(5, 100.0)).shape == (1, TINY.d_model)
    # stored train means standardise to the zero vector
    assert not model.standardize_volumes(model.stats.volume_mean).any()
    for p in model.volume_encoder.parameters():
        p.data = np.zeros(p.shape)
    model.volume_encoder.fc2.bias.data = np.arange(TINY.d_model, dtype=float)
    assert np.array_equal(volume_encode(model, np.ones(5)).data[0], np.arange(TINY.d_model))
    with pytest.raises(ShapeError):
        volume_encode(model, np.ones(4))
    model.stats = None
    with pytest.raises(ContractError):
        volume_encode(model, np.ones(5))


def test_zero_head_gives_constant_prediction():
    model = tiny_model()
    for p in model.head.parameters():
        p.data = np.zeros(p.shape)
    model.head.fc2.bias.data = np.array([0.5])
    rng = DeterministicRng(4)
    for _ in range(3):
        assert model_forward(model, sample(rng)) == pytest.approx(68.0 + 0.5 * 10.0, abs=1e-12)


def test_forward_is_deterministic_and_batch_consistent():
    model = tiny_model()
    rng = DeterministicRng(5)
    samples = [sample(rng) for _ in range(4)]
    single = [model_forward(model, s) for s in samples]
    batch = model.predict(np.stack([s.views for s in samples]), np.stack([s.region_volumes for s in samples]))
    assert np.allclose(single, batch, atol=1e-10)
    assert single == [model_forward(model, s) for s in samples]


def test_every_view_influences_output():
    model = tiny_model()
    s = sample(DeterministicRng(6))
    views = [Tensor(v) for v in (s.view_s, s.view_c, s.view_a)]
    vols = np.asarray(s.region_volumes)[None]
    fn = lambda: sum_(model.forward(*(reshape(v, (1,) + v.shape) for v in views), vols))  # noqa: E731
    grads = analytic_grads(fn, views)
    rng = DeterministicRng(7)
    for v, g in zip(views, grads):
        assert np.abs(g).max() > 0
        idx = rng.choice(v.size, 5, replace=False)
        num = numerical_grad(fn, v, indices=idx)
        assert relative_error(g, num) < 1e-4


def test_view_swap_changes_prediction():
    changed = 0
    for seed in range(20):
        model = tiny_model(seed)
        s = sample(DeterministicRng(100 + seed))
        swapped = PseudoSample(s.view_c, s.view_s, s.view_a, s.region_volumes, s.age)
        changed += abs(model_forward(model, s) - model_forward(model, swapped)) > 1e-9
    assert changed >= 19


def test_full_model_input_gradient_on_random_voxels():
    model = tiny_model(3)
    rng = DeterministicRng(8)
    s = sample(rng)
    x = Tensor(s.views[None])
    vols = np.asarray(s.region_volumes)[None]
    fn = lambda: sum_(model.forward(x[:, 0], x[:, 1], x[:, 2], vols))  # noqa: E731
    (g,) = analytic_grads(fn, [x])
    idx = rng.choice(x.size, 10, replace=False)
    assert relative_error(g, numerical_grad(fn, x, indices=idx)) < 1e-4


def test_full_model_parameter_gradients():
    model = tiny_model(4)
    rng = DeterministicRng(9)
    s = sample(rng)
    vols = np.asarray(s.region_volumes)[None]
    views = s.views[None]
    fn = lambda: sum_(model.forward(views[:, 0], views[:, 1], views[:, 2], vols))  # noqa: E731
    named = [(n, p) for n, p in model.named_parameters() if not n.endswith("k_proj.bias")]
    grads = analytic_grads(fn, [p for _, p in named])
    worst = 0.0
    for (name, p), g in zip(named, grads):
        idx = rng.choice(p.size, min(3, p.size), replace=False)
        worst = max(worst, relative_error(g, numerical_grad(fn, p, indices=idx)))
    assert worst < 1e-4


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = tiny_model(5)
    s = sample(DeterministicRng(10))
    path = save_checkpoint(model, tmp_path / "ck")
    again = load_checkpoint(path)
    assert model_forward(again, s) == model_forward(model, s)
    assert again.config == model.config
    assert not (tmp_path / "ck.partial").exists()


def test_checkpoint_corruption_and_version(tmp_path):
    import json

    path = save_checkpoint(tiny_model(), tmp_path / "ck")
    f = next((path / "params").glob("*.tensor"))
    f.write_bytes(f.read_bytes()[:-5])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    path = save_checkpoint(tiny_model(), tmp_path / "ck2")
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FormatVersionError):
        load_checkpoint(path)
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "missing")
