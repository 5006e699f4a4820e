import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from depthseg.core import (
    GridIndex,
    Rng,
    Tensor2,
    Tensor3,
    avg_pool_to,
    cosine_similarity,
    rng_new,
    rng_uniform,
)

finite_floats = st.floats(
    min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False
)


def vectors(min_size=1, max_size=8):
    return st.lists(finite_floats, min_size=min_size, max_size=max_size)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 0.0]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_value(self):
        # (3*4 + 4*3) / (5*5)
        assert cosine_similarity([3.0, 4.0], [4.0, 3.0]) == pytest.approx(0.96, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1.0], [1.0, 2.0])

    def test_zero_vector_is_zero(self):
        assert cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0

    @given(vectors(min_size=2, max_size=6))
    def test_self_similarity_is_one(self, v):
        a = np.array(v)
        if np.linalg.norm(a) < 1e-3:
            return
        assert abs(cosine_similarity(a, a) - 1.0) <= 1e-6

    @given(vectors(min_size=2, max_size=6), vectors(min_size=2, max_size=6))
    def test_symmetry(self, u, v):
        if len(u) != len(v):
            return
        assert cosine_similarity(u, v) == pytest.approx(cosine_similarity(v, u), abs=1e-12)

    @given(
        vectors(min_size=2, max_size=6),
        vectors(min_size=2, max_size=6),
        st.floats(min_value=0.25, max_value=64.0),
    )
    def test_scale_invariance(self, u, v, alpha):
        if len(u) != len(v):
            return
        a = np.array(u)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        assert cosine_similarity(alpha * a, v) == pytest.approx(
            cosine_similarity(a, v), abs=1e-9
        )


class TestTensors:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Tensor2(np.array([[np.nan, 0.0]]))
        with pytest.raises(ValueError):
            Tensor3(np.full((1, 1, 1), np.inf))

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ValueError):
            Tensor2(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            Tensor3(np.zeros((2, 2)))

    def test_positions_matrix_layout(self):
        t = Tensor3(np.arange(12.0).reshape(2, 2, 3))
        m = t.positions_matrix()
        assert m.shape == (6, 2)
        # position (row 1, col 2) -> linear 5
        assert np.array_equal(m[5], t.at(GridIndex(1, 2)))


class TestPooling:
    def test_constant(self):
        out = avg_pool_to(Tensor2(np.ones((2, 2))), 1, 1)
        assert out.data.tolist() == [[1.0]]

    def test_mean(self):
        out = avg_pool_to(Tensor2(np.array([[0.0, 1.0], [1.0, 0.0]])), 1, 1)
        assert out.data.tolist() == [[0.5]]

    def test_blockwise_oracle(self):
        m = np.zeros((4, 4))
        m[:2] = 0.2
        m[2:] = 0.8
        out = avg_pool_to(Tensor2(m), 2, 2)
        assert out.data.tolist() == [[0.2, 0.2], [0.8, 0.8]]

    def test_random_against_loop_oracle(self):
        rng = np.random.default_rng(7)
        m = rng.random((6, 8))
        out = avg_pool_to(Tensor2(m), 3, 2)
        for i in range(3):
            for j in range(2):
                block = m[i * 2 : (i + 1) * 2, j * 4 : (j + 1) * 4]
                expected = sum(block.reshape(-1)) / block.size
                assert out.data[i, j] == pytest.approx(expected, abs=1e-12)

    def test_non_divisible_errors(self):
        with pytest.raises(ValueError):
            avg_pool_to(Tensor2(np.zeros((5, 4))), 2, 2)

    @settings(max_examples=30)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
    def test_global_mean_preserved(self, ho, wo, bh, bw):
        rng = np.random.default_rng(ho * 97 + wo * 13 + bh * 7 + bw)
        m = rng.random((ho * bh, wo * bw))
        out = avg_pool_to(Tensor2(m), ho, wo)
        assert abs(out.data.mean() - m.mean()) <= 1e-6


class TestRng:
    def test_determinism(self):
        a = [Rng(0).randint(1000) for _ in range(1)]
        seq1 = Rng(123)
        seq2 = Rng(123)
        assert [seq1.randint(10**9) for _ in range(64)] == [
            seq2.randint(10**9) for _ in range(64)
        ]
        assert a == a

    def test_single_outcome(self):
        r = Rng(5)
        assert all(r.randint(1) == 0 for _ in range(32))

    def test_zero_outcomes_rejected(self):
        with pytest.raises(ValueError):
            Rng(0).randint(0)

    def test_chi_square_uniformity(self):
        n, draws = 16, 100_000
        r = rng_new(42)
        counts = np.zeros(n)
        for _ in range(draws):
            counts[rng_uniform(r, n)] += 1
        expected = draws / n
        stat = float(((counts - expected) ** 2 / expected).sum())
        # p > 0.01 <=> statistic below the 99% quantile of chi2(n-1)
        assert stat < chi2.ppf(0.99, n - 1)

    def test_spawn_streams_differ(self):
        root = Rng(9)
        a, b = root.spawn(1), root.spawn(2)
        assert [a.randint(100) for _ in range(8)] != [b.randint(100) for _ in range(8)]
        # spawning does not consume parent state
        c = Rng(9)
        assert root.randint(10**6) == c.randint(10**6)

    def test_choose_distinct(self):
        r = Rng(3)
        picked = r.choose_distinct(10, 10)
        assert sorted(picked) == list(range(10))
        with pytest.raises(ValueError):
            r.choose_distinct(3, 4)

    def test_float_range(self):
        r = Rng(11)
        xs = [r.random() for _ in range(1000)]
        assert all(0.0 <= x < 1.0 for x in xs)
