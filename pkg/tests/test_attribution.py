import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainage.attribution import (
    ViewGradients,
    average_maps,
    batch_view_gradients,
    corpus_gradient_map,
    fuse_to_volume,
    rank_regions,
    ranking_svg,
    view_gradients,
    write_ranking_csv,
)
from brainage.errors import ContractError, ShapeError
from brainage.model import BrainAgeModel, ModelConfig, PseudoSample, Standardization
from brainage.numcore import DeterministicRng
from brainage.synthcorpus import CropGeometry

TINY = ModelConfig(chunk_shape=(8, 8, 4), n_regions=5, encoder_channels=(4, 6), d_model=16, n_heads=2,
                   stem_queries=4, trunk_layers=1, ffn_hidden=24, volume_hidden=12, head_hidden=10, seed=3)
CROP = CropGeometry((12, 12, 12), (8, 8, 4))


def model():
    return BrainAgeModel(TINY, Standardization(np.full(5, 100.0), np.full(5, 20.0), 68.0, 10.0))


def sample(rng):
    c = TINY.chunk_shape
    return PseudoSample(rng.uniform(size=c), rng.uniform(size=c), rng.uniform(size=c),
                        rng.uniform(60, 140, size=5), float(rng.uniform(42, 95)))


def test_view_gradients_match_finite_differences():
    m = model()
    rng = DeterministicRng(0)
    s = sample(rng)
    g = view_gradients(m, s)
    h = 1e-4

    def loss(views):
        pred = m.predict(views[None], np.asarray(s.region_volumes)[None])[0]
        return (pred - s.age) ** 2

    base = s.views
    for view, gv in enumerate(g):
        assert gv.shape == TINY.chunk_shape
        for flat in rng.choice(gv.size, 5, replace=False):
            idx = np.unravel_index(flat, gv.shape)
            up, dn = base.copy(), base.copy()
            up[(view,) + idx] += h
            dn[(view,) + idx] -= h
            num = (loss(up) - loss(dn)) / (2 * h)
            assert abs(gv[idx] - num) <= 1e-4 * max(abs(num), 1e-3 * np.abs(gv).max())


def test_batched_gradients_equal_per_sample():
    m = model()
    rng = DeterministicRng(1)
    samples = [sample(rng) for _ in range(3)]
    batch = batch_view_gradients(m, np.stack([s.views for s in samples]),
                                 np.stack([s.region_volumes for s in samples]), np.array([s.age for s in samples]))
    for row, s in zip(batch, samples):
        assert np.allclose(row, np.stack(list(view_gradients(m, s))), rtol=1e-10, atol=1e-14)
    assert all(p.grad is None for p in m.parameters())


def test_zero_head_gives_zero_gradients():
    m = model()
    for p in m.head.parameters():
        p.data = np.zeros(p.shape)
    g = view_gradients(m, sample(DeterministicRng(2)))
    assert all(not gv.any() for gv in g)


def _one_voxel_views(values, voxel):
    grads = [np.zeros(CROP.chunk_shape) for _ in range(3)]
    for view, v in enumerate(values):
        idx = CROP.chunk_indices(view)
        hit = np.argwhere((idx[0] == voxel[0]) & (idx[1] == voxel[1]) & (idx[2] == voxel[2]))
        assert len(hit) == 1
        grads[view][tuple(hit[0])] = v
    return grads


def test_fuse_examples():
    center = (6, 6, 6)
    out = fuse_to_volume(_one_voxel_views((1.0, -2.0, 0.5), center), CROP)
    assert out[center] == 0.5 and out.sum() == 0.5
    grads = [np.zeros(CROP.chunk_shape) for _ in range(3)]
    grads[1][0, 0, 0] = -3.0
    out = fuse_to_volume(grads, CROP)
    assert out.max() == 3.0 and out.sum() == 3.0
    assert not fuse_to_volume([np.zeros(CROP.chunk_shape)] * 3, CROP).any()


def test_fuse_errors():
    with pytest.raises(ShapeError):
        fuse_to_volume([np.zeros((8, 8, 5))] * 3, CROP)
    with pytest.raises(ContractError):
        fuse_to_volume([np.zeros(CROP.chunk_shape)] * 2, CROP)


@settings(max_examples=30)
@given(st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_single_view_mass_is_conserved(view, seed):
    grads = [np.zeros(CROP.chunk_shape) for _ in range(3)]
    grads[view] = DeterministicRng(seed).normal(size=CROP.chunk_shape)
    out = fuse_to_volume(ViewGradients(*grads), CROP)
    assert out.min() >= 0
    assert out.sum() == pytest.approx(np.abs(grads[view]).sum(), rel=1e-12)


def test_average_examples():
    v = DeterministicRng(3).uniform(size=(4, 4, 4))
    assert np.array_equal(average_maps([v]), v)
    assert np.allclose(average_maps([np.zeros_like(v), v]), v / 2)
    assert np.allclose(average_maps([v] * 5), v, rtol=1e-15)
    with pytest.raises(ContractError):
        average_maps([])
    with pytest.raises(ShapeError):
        average_maps([v, np.zeros((3, 3, 3))])


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_average_is_order_invariant(seed, n):
    rng = DeterministicRng(seed)
    maps = [rng.uniform(size=(5, 5, 5)) for _ in range(n)]
    perm = rng.permutation(n)
    assert np.max(np.abs(average_maps(maps) - average_maps([maps[i] for i in perm]))) <= 1e-12


def _labels():
    lab = np.zeros((6, 6, 6), dtype=int)
    lab[:2] = 1
    lab[2:3] = 2
    lab[3:5, :3] = 3
    return lab


def test_rank_uniform_map_falls_back_to_id_order():
    ranking = rank_regions(np.ones((6, 6, 6)), _labels(), voxel_volume=8.0)
    assert [r.region_id for r in ranking] == [1, 2, 3]
    assert all(r.score == pytest.approx(1 / 8) for r in ranking)
    assert [r.rank for r in ranking] == [1, 2, 3]


def test_rank_signal_in_one_region():
    lab = _labels()
    g = np.where(lab == 3, 1.0, 0.0)
    ranking = rank_regions(g, lab)
    assert ranking[0].region_id == 3 and ranking[0].attribution == pytest.approx((lab == 3).sum())


def test_rank_zero_volume_region_goes_last(caplog):
    lab = _labels()
    with caplog.at_level(logging.WARNING):
        ranking = rank_regions(np.ones((6, 6, 6)), lab, volumes=np.array([8.0, 0.0, 8.0]))
    assert ranking[-1].region_id == 2 and ranking[-1].score == 0.0
    assert "zero volume" in caplog.text


def test_rank_errors():
    with pytest.raises(ShapeError):
        rank_regions(np.ones((5, 6, 6)), _labels())
    with pytest.raises(ContractError):
        rank_regions(np.ones((6, 6, 6)), _labels(), volumes=np.ones(2))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_ranking_is_a_permutation_with_sorted_scores(seed):
    rng = DeterministicRng(seed)
    lab = rng.integers(0, 7, size=(5, 5, 5))
    lab.flat[:6] = np.arange(1, 7)
    ranking = rank_regions(rng.uniform(size=(5, 5, 5)), lab)
    assert sorted(r.region_id for r in ranking) == list(range(1, 7))
    scores = [r.score for r in ranking]
    assert scores == sorted(scores, reverse=True) and min(scores) >= 0


def test_corpus_map_and_outputs(tmp_path):
    m = model()
    rng = DeterministicRng(4)
    samples = [sample(rng) for _ in range(5)]
    views = np.stack([s.views for s in samples])
    vols = np.stack([s.region_volumes for s in samples])
    ages = np.array([s.age for s in samples])
    fused = corpus_gradient_map(m, views, vols, ages, CROP, batch_size=2)
    manual = average_maps([fuse_to_volume(view_gradients(m, s), CROP) for s in samples])
    assert fused.count == 5 and np.allclose(fused.volume, manual, rtol=1e-10, atol=1e-15)
    lab = np.zeros((12, 12, 12), dtype=int)
    lab[4:8, 4:8, 4:8] = 1
    lab[0:4] = 2
    ranking = rank_regions(fused.volume, lab)
    write_ranking_csv(ranking, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "rank,region_id,score,volume"
    assert ranking_svg(ranking, highlight=[1]).startswith("<svg")
