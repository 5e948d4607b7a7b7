import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import ndtri

from langstep.noise import NoiseSource, gaussian_block


def reference_normals(seed, stream, count, q=1):
    """Fresh numpy Philox keyed (seed, stream), read from the start."""
    bg = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    w = bg.random_raw(count * q)
    u = (w >> np.uint64(11)).astype(float) * 2.0**-53 + 2.0**-54
    return ndtri(u).reshape(count, q)


class TestNoiseSource:
    def test_matches_fresh_philox(self):
        np.testing.assert_array_equal(NoiseSource(7, 3).normals(0, 50), reference_normals(7, 3, 50))
        np.testing.assert_array_equal(NoiseSource(7, 3, q=3).normals(0, 20), reference_normals(7, 3, 20, 3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**40), st.integers(0, 1000), st.integers(0, 37), st.integers(1, 20), st.integers(1, 3))
    def test_random_access(self, seed, stream, start, count, q):
        full = reference_normals(seed, stream, start + count, q)
        np.testing.assert_array_equal(NoiseSource(seed, stream, q).normals(start, count), full[start:])

    def test_sequential_cursor(self):
        a = NoiseSource(1, 2)
        parts = [a.next(3), a.next(5), a.next(1)]
        np.testing.assert_array_equal(np.concatenate(parts), NoiseSource(1, 2).normals(0, 9))
        assert a.counter == 9
        np.testing.assert_array_equal(NoiseSource(1, 2).normal(4), parts[1][1])

    def test_streams_differ(self):
        a = NoiseSource(0, 0).normals(0, 1000)[:, 0]
        b = NoiseSource(0, 1).normals(0, 1000)[:, 0]
        c = NoiseSource(1, 0).normals(0, 1000)[:, 0]
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.15
        assert abs(np.corrcoef(a, c)[0, 1]) < 0.15

    def test_gaussian(self):
        z = NoiseSource(11, 5).normals(0, 200_000)[:, 0]
        assert stats.kstest(z, "norm").pvalue > 1e-3
        assert abs(z.mean()) < 5 / np.sqrt(z.size)
        assert np.all(np.abs(z) < 8.3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            NoiseSource(0, 0, q=0)
        with pytest.raises(ValueError):
            NoiseSource(0, 0).normals(-1, 3)


class TestGaussianBlock:
    @pytest.mark.parametrize("q", [1, 3])
    def test_layout(self, q):
        streams = np.array([4, 0, 9])
        Z = gaussian_block(5, streams, 10, 70, q)
        assert Z.shape == (70, 3, q)
        for i, s in enumerate(streams):
            np.testing.assert_array_equal(Z[:, i, :], NoiseSource(5, s, q).normals(10, 70))

    def test_chunking_invariance(self):
        whole = gaussian_block(3, np.arange(6), 0, 130)
        split = np.concatenate([gaussian_block(3, np.arange(6), 0, 64), gaussian_block(3, np.arange(6), 64, 66)])
        np.testing.assert_array_equal(whole, split)
        np.testing.assert_array_equal(whole[:, 2:4], gaussian_block(3, [2, 3], 0, 130))
