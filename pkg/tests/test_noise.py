import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssod import autograd as ag
from ssod import noise as nz
from ssod.noise import NoiseSpec


def _blocks_cover(zero, b):
    """True when the zero set is a union of b x b blocks."""
    H, W = zero.shape
    covered = np.zeros_like(zero)
    for i in range(H - b + 1):
        for j in range(W - b + 1):
            if zero[i:i + b, j:j + b].all():
                covered[i:i + b, j:j + b] = True
    return np.array_equal(covered, zero)


def test_zero_probability_is_identity(rng):
    x = rng.normal(size=(8, 4, 4))
    for spec in (NoiseSpec("dropblock", drop_prob=0.0), NoiseSpec("spatial_dropout", channel_ratio=0.0)):
        out = nz.perturb(x, spec, seed=3).data
        assert out.tobytes() == x.tobytes()


def test_full_channel_dropout_without_rescale_zeroes(rng):
    out = nz.perturb(rng.normal(size=(8, 4, 4)), NoiseSpec("spatial_dropout", channel_ratio=1.0,
                                                             rescale=False), seed=0)
    assert np.all(out.data == 0)


def test_dropblock_fraction_monte_carlo():
    spec = NoiseSpec("dropblock", block_size=2, drop_prob=0.3)
    fr = [1.0 - nz.dropblock_mask((32, 4, 4), spec, np.random.default_rng(s)).mean()
          for s in range(10_000)]
    assert abs(np.mean(fr) - 0.3) <= 0.02


@pytest.mark.parametrize("H,W,b,p", [(4, 4, 2, 0.3), (4, 4, 2, 0.1), (7, 5, 3, 0.5), (16, 16, 2, 0.2)])
def test_block_rate_solves_coverage(H, W, b, p):
    rate = nz.block_rate(H, W, b, p)
    expected = np.mean(1 - (1 - rate) ** nz._coverage(H, W, b))
    assert abs(expected - p) < 1e-10


def test_coverage_counts_by_enumeration():
    H, W, b = 5, 4, 2
    count = np.zeros((H, W), dtype=int)
    for i in range(H - b + 1):
        for j in range(W - b + 1):
            count[i:i + b, j:j + b] += 1
    assert np.array_equal(nz._coverage(H, W, b), count)


@given(st.integers(0, 10**6), st.integers(2, 8), st.integers(2, 8), st.integers(1, 3),
       st.floats(0.05, 0.8))
def test_dropblock_zero_pattern_is_block_union(seed, H, W, b, p):
    b = min(b, H, W)
    spec = NoiseSpec("dropblock", block_size=b, drop_prob=p, rescale=True)
    m = nz.noise_mask((3, H, W), spec, np.random.default_rng(seed))
    zero = m == 0
    # identical across channels, made of b x b blocks
    assert all(np.array_equal(zero[0], zero[c]) for c in range(3))
    assert _blocks_cover(zero[0], b)
    kept = (~zero[0]).mean()
    if 0 < kept < 1:
        np.testing.assert_allclose(m[~zero], 1.0 / kept, rtol=0, atol=1e-12)


@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_spatial_dropout_zeroes_whole_channels(seed, ratio):
    m = nz.noise_mask((16, 3, 4), NoiseSpec("spatial_dropout", channel_ratio=ratio),
                      np.random.default_rng(seed))
    per_channel = (m == 0).reshape(16, -1)
    assert np.all(per_channel.all(axis=1) | ~per_channel.any(axis=1))


def test_perturb_deterministic(rng):
    x = rng.normal(size=(4, 4, 4))
    spec = NoiseSpec("dropblock", drop_prob=0.3)
    assert np.array_equal(nz.perturb(x, spec, 5).data, nz.perturb(x, spec, 5).data)


def test_block_exceeding_map_raises():
    with pytest.raises(ValueError, match="exceeds"):
        nz.perturb(np.ones((2, 3, 3)), NoiseSpec("dropblock", block_size=4), 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("gaussian")
    with pytest.raises(ValueError):
        NoiseSpec("dropblock", drop_prob=1.0)
    with pytest.raises(ValueError):
        NoiseSpec("spatial_dropout", channel_ratio=1.5)
    s = NoiseSpec("dropblock", drop_prob=0.2)
    assert NoiseSpec.from_dict(s.to_dict()) == s


def test_noisy_set_sizes_and_repeatability(rng):
    x = rng.normal(size=(8, 4, 4))
    specs = nz.default_specs()
    assert len(nz.make_noisy_set(x, specs, 1, seed=2)) == 1
    a = nz.make_noisy_set(x, specs, 4, seed=2, proposal_id=7)
    b = nz.make_noisy_set(x, specs, 4, seed=2, proposal_id=7)
    assert len(a) == 4 and all(np.array_equal(u.data, v.data) for u, v in zip(a, b))
    with pytest.raises(ValueError):
        nz.make_noisy_set(x, specs, 0, seed=2)


def test_variants_alternate_specs(rng):
    x = rng.normal(size=(32, 4, 4)) + 5.0
    specs = [NoiseSpec("dropblock", drop_prob=0.5), NoiseSpec("spatial_dropout", channel_ratio=0.5)]
    for seed in range(20):
        v = nz.make_noisy_set(x, specs, 4, seed=seed)
        for k in (1, 3):
            zero = (v[k].data == 0).reshape(32, -1)
            assert np.all(zero.all(axis=1) | ~zero.any(axis=1))


def test_variants_differ(rng):
    # on a 16x16 map two draws at p = 0.1 coincide with negligible probability
    x = rng.normal(size=(8, 16, 16)) + 3.0
    specs = [NoiseSpec("dropblock", drop_prob=0.1)]
    differ = 0
    for seed in range(200):
        v = nz.make_noisy_set(x, specs, 2, seed=seed)
        differ += not np.array_equal(v[0].data, v[1].data)
    assert differ / 200 > 0.99


def test_noisy_masks_match_make_noisy_set(rng):
    x = rng.normal(size=(4, 4, 4))
    specs = nz.default_specs()
    masks = nz.noisy_masks(x.shape, [3, 9], specs, 3, seed=11)
    for n, pid in enumerate([3, 9]):
        ref = nz.make_noisy_set(x, specs, 3, seed=11, proposal_id=pid)
        for k in range(3):
            np.testing.assert_array_equal(masks[n, k] * x, ref[k].data)


def test_gradient_through_noise_is_mask(rng):
    x = ag.parameter(rng.normal(size=(4, 4, 4)))
    spec = NoiseSpec("dropblock", drop_prob=0.4)
    mask = nz.noise_mask(x.shape, spec, np.random.default_rng(8))
    ag.backward(ag.sum(nz.perturb(x, spec, 8)))
    assert np.array_equal(x.grad, mask)
