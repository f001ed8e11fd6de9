import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicsi import pipeline as pl
from unicsi.channelgen import CsiTensor
from unicsi.errors import RangeError


def _dft_matrix(n):
    # independent of numpy.fft: explicit unitary DFT
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def _rand_h(rng, K, n_bs, n_ue):
    return rng.standard_normal((2, K, n_bs, n_ue))


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_category_table():
    cats = pl.categories()
    assert [c.ifft_size for c in cats] == [16, 32, 64, 128, 256]
    assert all(c.ifft_size == 2 ** (c.index + 3) for c in cats)
    assert all(c.rb_max <= c.ifft_size for c in cats)
    assert cats[0].rb_min == 1 and cats[-1].rb_max == 256
    assert all(b.rb_min == a.rb_max + 1 for a, b in zip(cats, cats[1:]))


@pytest.mark.parametrize("K,index", [(1, 1), (16, 1), (17, 2), (64, 3), (128, 4), (129, 5), (256, 5)])
def test_categorize_examples(K, index):
    assert pl.categorize(K).index == index


@pytest.mark.parametrize("K", [0, 257, 273, 300])
def test_categorize_rejects_out_of_range(K):
    with pytest.raises(RangeError, match="K out of supported range"):
        pl.categorize(K)


def test_categorize_total_and_unique():
    for K in range(1, 257):
        hits = [c for c in pl.categories() if c.rb_min <= K <= c.rb_max]
        assert hits == [pl.categorize(K)]


def test_partition_shape_and_order():
    rng = np.random.default_rng(0)
    h = _rand_h(rng, 128, 32, 4)
    parts = pl.partition(h)
    assert len(parts) == 128
    assert all(p.shape == (2, 128) for p in parts)
    assert np.array_equal(parts[4 * 3 + 2], h[:, :, 3, 2])


def test_partition_single_antenna_is_identity():
    h = np.random.default_rng(1).standard_normal((2, 20, 1, 1))
    (p,) = pl.partition(h)
    assert np.array_equal(p, h[:, :, 0, 0])


@settings(max_examples=30, deadline=None)
@given(K=st.integers(1, 40), n_bs=st.integers(1, 6), n_ue=st.integers(1, 4), seed=st.integers(0, 999))
def test_partition_concat_bitwise_inverse(K, n_bs, n_ue, seed):
    h = _rand_h(np.random.default_rng(seed), K, n_bs, n_ue)
    back = pl.reconstruct_concat(pl.partition(h), n_bs, n_ue)
    assert back.data.tobytes() == h.tobytes()


def test_reconstruct_concat_count_mismatch():
    with pytest.raises(ValueError):
        pl.reconstruct_concat([np.zeros((2, 4))] * 3, 2, 2)


def test_reconstruct_concat_zero():
    out = pl.reconstruct_concat([np.zeros((2, 128))] * 128, 32, 4)
    assert out.data.shape == (2, 128, 32, 4) and not out.data.any()


def test_partition_along_frequency_blocks():
    h = _rand_h(np.random.default_rng(2), 128, 32, 4)
    blocks = pl.partition_along(h, "frequency", 4)
    assert [b.shape for b in blocks] == [(2, 32, 32, 4)] * 4
    assert np.array_equal(blocks[1], h[:, 32:64])


@pytest.mark.parametrize("dim", ["frequency", "bs_antenna", "ue_antenna"])
def test_partition_along_identity_and_round_trip(dim):
    h = _rand_h(np.random.default_rng(3), 128, 32, 4)
    (one,) = pl.partition_along(h, dim, 1)
    assert np.array_equal(one, h)
    assert np.array_equal(pl.concat_along(pl.partition_along(h, dim, 4), dim), h)


def test_partition_along_rejects_uneven_split():
    with pytest.raises(ValueError):
        pl.partition_along(np.zeros((2, 10, 4, 4)), "frequency", 4)
    with pytest.raises(ValueError):
        pl.partition_along(np.zeros((2, 8, 4, 4)), "time", 2)


def test_to_delay_zero():
    s = pl.to_delay(np.zeros((2, 50)), pl.categorize(50))
    assert s.data.shape == (128,) and not s.data.any()


@pytest.mark.parametrize("cat", pl.categories(), ids=lambda c: f"cat{c.index}")
def test_constant_response_is_scaled_impulse(cat):
    n = cat.ifft_size
    s = np.stack([np.ones(n), np.zeros(n)])
    d = pl.to_delay(s, cat).data
    expect = np.zeros(2 * n)
    expect[0] = np.sqrt(n)
    assert np.max(np.abs(d - expect)) < 1e-12


@pytest.mark.parametrize("cat", pl.categories(), ids=lambda c: f"cat{c.index}")
def test_impulse_maps_to_constant_response(cat):
    n = cat.ifft_size
    data = np.zeros(2 * n)
    data[0] = np.sqrt(n)
    for K in (1, cat.rb_min, n):
        f = pl.from_delay(pl.DelaySample(data, cat), K)
        assert np.max(np.abs(f - np.stack([np.ones(K), np.zeros(K)]))) < 1e-12


def test_from_delay_zero():
    cat = pl.category(2)
    assert not pl.from_delay(pl.DelaySample(np.zeros(64), cat), 20).any()


@settings(max_examples=50, deadline=None)
@given(K=st.integers(1, 256), seed=st.integers(0, 10_000))
def test_to_delay_matches_dft_matrix_and_parseval(K, seed):
    cat = pl.categorize(K)
    n = cat.ifft_size
    s = np.random.default_rng(seed).standard_normal((2, K))
    d = pl.to_delay(s, cat).data
    z = np.zeros(n, complex)
    z[:K] = s[0] + 1j * s[1]
    ref = _dft_matrix(n).conj().T @ z
    assert np.max(np.abs(d[:n] + 1j * d[n:] - ref)) < 1e-12 * max(1.0, np.abs(ref).max())
    assert abs(np.linalg.norm(d) / np.linalg.norm(s) - 1) < 1e-9


@settings(max_examples=50, deadline=None)
@given(K=st.integers(1, 256), seed=st.integers(0, 10_000))
def test_delay_round_trip(K, seed):
    cat = pl.categorize(K)
    s = np.random.default_rng(seed).standard_normal((2, K))
    back = pl.from_delay(pl.to_delay(s, cat), K)
    assert _rel(back, s) < 1e-9


def test_to_delay_rejects_oversized_slice():
    with pytest.raises(RangeError):
        pl.to_delay(np.zeros((2, 40)), pl.category(2))


def test_delay_sample_validation():
    with pytest.raises(ValueError):
        pl.DelaySample(np.zeros(10), pl.category(1))
    with pytest.raises(ValueError):
        pl.DelaySample(np.full(32, np.nan), pl.category(1))


def test_rms_normalize_unit_rms_and_zero_rows():
    x = np.random.default_rng(4).standard_normal((5, 32)) * 7
    x[2] = 0
    y, scale = pl.rms_normalize(x)
    rms = np.sqrt(np.mean(y**2, axis=1))
    assert np.allclose(np.delete(rms, 2), 1.0)
    assert scale[2] == 1.0 and not y[2].any()
    assert np.allclose(y * scale[:, None], x)


def test_tensors_to_delay_matches_per_slice_path():
    rng = np.random.default_rng(5)
    tensors = [CsiTensor(_rand_h(rng, 100, 3, 2)) for _ in range(2)]
    ds = pl.tensors_to_delay(tensors, ids=[10, 11])
    assert ds.category.index == 4
    assert ds.data.shape == (12, 256)
    assert np.allclose(np.sqrt(np.mean(ds.data**2, axis=1)), 1.0)
    i = 0
    for tid, t in zip([10, 11], tensors):
        for b in range(3):
            for u in range(2):
                assert tuple(ds.origin[i]) == (tid, b, u, 100)
                ref = pl.to_delay(t.data[:, :, b, u], ds.category).data
                assert np.allclose(ds.raw()[i], ref, rtol=0, atol=1e-12)
                assert np.allclose(pl.from_delay(ds.sample(i), 100), t.data[:, :, b, u], atol=1e-12)
                i += 1


@pytest.mark.parametrize("cat", pl.categories(), ids=lambda c: f"cat{c.index}")
def test_end_to_end_tensor_round_trip(cat):
    rng = np.random.default_rng(cat.index)
    for K in rng.integers(cat.rb_min, cat.rb_max + 1, size=3):
        K = int(K)
        h = CsiTensor(_rand_h(rng, K, 4, 2))
        parts = [pl.from_delay(pl.to_delay(p, cat), K) for p in pl.partition(h)]
        back = pl.reconstruct_concat(parts, 4, 2)
        assert _rel(back.data, h.data) < 1e-9


def test_delay_set_concat_and_subset():
    rng = np.random.default_rng(6)
    a = pl.tensors_to_delay([CsiTensor(_rand_h(rng, 70, 2, 2))], ids=[0])
    b = pl.tensors_to_delay([CsiTensor(_rand_h(rng, 90, 2, 2))], ids=[1])
    both = pl.DelaySet.concat([a, b])
    assert len(both) == 8
    assert np.array_equal(both.subset(slice(4, 8)).data, b.data)
    c = pl.tensors_to_delay([CsiTensor(_rand_h(rng, 20, 1, 1))])
    with pytest.raises(ValueError):
        pl.DelaySet.concat([a, c])
