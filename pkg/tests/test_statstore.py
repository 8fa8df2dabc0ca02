from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import covariance_oracle, dyadic_map, pair_oracle
from semflow.errors import (
    BadMagic,
    BandwidthTooSmall,
    ChannelMismatch,
    CorruptPayload,
    ImageSmallerThanBandwidth,
    InsufficientData,
    IoError,
    NonFinite,
    NotPositiveDefinite,
    ShapeMismatch,
    VersionMismatch,
)
from semflow.imagefeat import FeatureMap
from semflow.statstore import (
    CHOLESKY,
    EXPLICIT_INVERSE,
    FRAC_BITS,
    DisplacementTensor,
    accumulate_stats,
    build_covariance,
    detector_factor,
    empty_stats,
    factorize,
    finalize,
    load_stats,
    merge_stats,
    regularize_psd,
    save_stats,
)

SCALE = float(1 << FRAC_BITS)


def _corpus(rng, n=4, shape=(7, 8), c=2):
    return [dyadic_map(rng, *shape, c) for _ in range(n)]


def _accumulate(maps, bandwidth):
    acc = empty_stats(maps[0].channels, bandwidth)
    for m in maps:
        acc = accumulate_stats(m, acc)
    return acc


def test_zero_map_only_counts():
    acc = accumulate_stats(FeatureMap(np.zeros((4, 5, 3))), empty_stats(3, 1))
    assert np.all(acc.raw == 0) and np.all(acc.sums == 0)
    assert acc.counts[1, 1] == 20
    assert acc.counts[2, 2] == 3 * 4  # offset (1, 1)


def test_all_ones_products_equal_counts():
    acc = accumulate_stats(FeatureMap(np.ones((3, 3, 1))), empty_stats(1, 1))
    np.testing.assert_array_equal(acc.raw[..., 0, 0] / SCALE**2, acc.counts)
    # 9 pixels; 6 pairs along each axis; 4 along each diagonal
    np.testing.assert_array_equal(acc.counts, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_input_not_modified(rng):
    fm = dyadic_map(rng, 5, 5, 2)
    before = fm.data.copy()
    acc = empty_stats(2, 2)
    out = accumulate_stats(fm, acc)
    np.testing.assert_array_equal(fm.data, before)
    assert acc.n_images == 0 and out.n_images == 1


def test_twice_equals_merge(rng):
    fm = dyadic_map(rng, 6, 6, 2)
    one = accumulate_stats(fm, empty_stats(2, 2))
    twice = accumulate_stats(fm, one)
    assert twice.equals(merge_stats(one, one))


def test_accumulate_errors(rng):
    with pytest.raises(ChannelMismatch):
        accumulate_stats(dyadic_map(rng, 5, 5, 3), empty_stats(2, 1))
    with pytest.raises(ImageSmallerThanBandwidth):
        accumulate_stats(dyadic_map(rng, 3, 9, 2), empty_stats(2, 3))


def test_merge_identity_and_split(rng):
    maps = _corpus(rng, n=4)
    seq = _accumulate(maps, 2)
    assert merge_stats(seq, empty_stats(2, 2)).equals(seq)
    parts = [_accumulate([m], 2) for m in maps]
    merged = merge_stats(merge_stats(parts[0], parts[1]), merge_stats(parts[2], parts[3]))
    assert merged.equals(seq)
    with pytest.raises(ShapeMismatch):
        merge_stats(seq, empty_stats(2, 1))


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 2**31 - 1))
def test_merge_order_independent(order, seed):
    rng = np.random.default_rng(seed)
    parts = [_accumulate([dyadic_map(rng, 4, 5, 2)], 1) for _ in range(5)]
    left = parts[0]
    for p in parts[1:]:
        left = merge_stats(left, p)
    shuffled = [parts[i] for i in order]
    right = shuffled[-1]
    for p in reversed(shuffled[:-1]):
        right = merge_stats(p, right)
    assert left.equals(right)


def test_finalize_constant_corpus():
    maps = [FeatureMap(np.full((5, 5, 2), [0.25, 0.5])) for _ in range(3)]
    mean, tensor = finalize(_accumulate(maps, 2))
    np.testing.assert_array_equal(mean, [0.25, 0.5])
    assert np.all(tensor.values == 0.0)


def test_finalize_matches_pair_oracle(rng):
    maps = _corpus(rng, n=3, shape=(6, 7), c=2)
    mean, tensor = finalize(_accumulate(maps, 2))
    o_mean, o_g = pair_oracle(maps, 2)
    np.testing.assert_allclose(mean, o_mean, rtol=0, atol=1e-14)
    np.testing.assert_allclose(tensor.values, o_g, rtol=0, atol=1e-13)


def test_tensor_conjugate_symmetry(rng):
    _, tensor = finalize(_accumulate(_corpus(rng, c=3), 2))
    for di in range(-2, 3):
        for dj in range(-2, 3):
            assert np.array_equal(tensor.at(di, dj), tensor.at(-di, -dj).T)
    assert np.all(np.diag(tensor.at(0, 0)) >= 0)


def test_finalize_insufficient():
    with pytest.raises(InsufficientData):
        finalize(empty_stats(2, 1))


@pytest.mark.parametrize("det", [(1, 1), (2, 1), (3, 3), (2, 3)])
def test_build_covariance_oracle(rng, det):
    maps = _corpus(rng, n=3, shape=(6, 6), c=2)
    _, tensor = finalize(_accumulate(maps, 2))
    _, g = pair_oracle(maps, 2)
    sigma = build_covariance(tensor, *det)
    oracle = covariance_oracle(g, 2, *det)
    assert np.linalg.norm(sigma - oracle) <= 1e-10 * np.linalg.norm(oracle)
    assert np.array_equal(sigma, sigma.T)


def test_build_covariance_small_cases():
    vals = np.zeros((3, 3, 1, 1))
    vals[1, 1] = 2.0
    vals[2, 1] = 0.5
    vals[0, 1] = 0.5
    tensor = DisplacementTensor(1, 1, vals)
    np.testing.assert_array_equal(build_covariance(tensor, 1, 1), [[2.0]])
    np.testing.assert_array_equal(build_covariance(tensor, 2, 1), [[2.0, 0.5], [0.5, 2.0]])
    with pytest.raises(BandwidthTooSmall):
        build_covariance(tensor, 3, 1)


def test_regularize_examples():
    reg, shift = regularize_psd(np.diag([1.0, -0.5]))
    delta = 1e-6 * 0.5 / 2
    assert shift == pytest.approx(0.5 + delta, rel=1e-12)
    np.testing.assert_allclose(reg, np.diag([1.5 + delta, delta]), rtol=1e-9)

    reg, shift = regularize_psd(np.zeros((3, 3)))
    np.testing.assert_array_equal(reg, 1e-8 * np.eye(3))

    spd = np.diag([2.0, 3.0, 4.0])
    _, shift = regularize_psd(spd)
    assert shift == pytest.approx(1e-6 * 3.0)

    with pytest.raises(NonFinite):
        regularize_psd(np.array([[np.nan]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_regularized_always_factorizes(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    sym = a + a.T
    reg, _ = regularize_psd(sym)
    np.linalg.cholesky(reg)


def test_factorize_examples():
    f = factorize(np.eye(3))
    np.testing.assert_array_equal(f.factor_data, np.eye(3))
    np.testing.assert_array_equal(f.solve(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    f = factorize(np.diag([4.0, 9.0]))
    np.testing.assert_allclose(f.factor_data, np.diag([2.0, 3.0]))
    np.testing.assert_allclose(f.solve(np.array([4.0, 9.0])), [1.0, 1.0])
    with pytest.raises(NotPositiveDefinite):
        factorize(np.diag([1.0, -1.0]))


def test_factor_kinds_agree(rng):
    a = rng.standard_normal((20, 20))
    spd = a @ a.T + 20 * np.eye(20)
    chol = factorize(spd, CHOLESKY)
    inv = factorize(spd, EXPLICIT_INVERSE)
    b = rng.standard_normal((20, 3))
    np.testing.assert_allclose(chol.solve(b), inv.solve(b), atol=1e-8, rtol=0)
    L = chol.factor_data
    assert np.allclose(L, np.tril(L)) and np.all(np.diag(L) > 0)
    assert np.linalg.norm(L @ L.T - spd) <= 1e-8 * np.linalg.norm(spd)
    assert np.abs(spd @ inv.factor_data - np.eye(20)).max() <= 1e-6


def test_detector_factor_geometry(rng):
    maps = _corpus(rng, n=3, shape=(8, 8), c=2)
    mean, tensor = finalize(_accumulate(maps, 2))
    f = detector_factor(mean, tensor, 3, 2)
    assert (f.detector_h, f.detector_w, f.channels, f.dim) == (3, 2, 2, 12)
    np.testing.assert_array_equal(f.mean_neg, np.tile(mean, 6))
    assert f.eig_shift > 0


def test_stats_roundtrip(tmp_path, rng):
    acc = _accumulate(_corpus(rng), 2)
    path = tmp_path / "s.scov"
    save_stats(acc, path)
    back = load_stats(path)
    assert back.equals(acc)
    save_stats(back, tmp_path / "t.scov")
    assert path.read_bytes() == (tmp_path / "t.scov").read_bytes()


def test_stats_corruption(tmp_path, rng):
    acc = _accumulate(_corpus(rng), 1)
    path = tmp_path / "s.scov"
    save_stats(acc, path)
    blob = path.read_bytes()
    (tmp_path / "trunc").write_bytes(blob[:-9])
    with pytest.raises(CorruptPayload):
        load_stats(tmp_path / "trunc")
    flipped = bytearray(blob)
    flipped[40] ^= 0x01
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(CorruptPayload):
        load_stats(tmp_path / "flip")
    (tmp_path / "magic").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(BadMagic):
        load_stats(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(blob[:4] + (7).to_bytes(4, "little") + blob[8:])
    with pytest.raises(VersionMismatch):
        load_stats(tmp_path / "ver")
    with pytest.raises(IoError):
        load_stats(tmp_path / "absent.scov")
