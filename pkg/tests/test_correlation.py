import numpy as np
import pytest

from depthseg.core import GridIndex, Rng, Tensor2, Tensor3, cosine_similarity
from depthseg.correlation import (
    CorrelationTensor,
    center_rows,
    depth_correlation,
    feature_correlation,
)
from depthseg.sampling import SampleSet


def random_tensor3(rng: Rng, c, h, w):
    return Tensor3(rng.normals((c, h, w)))


class TestFeatureCorrelation:
    def test_identical_constant_maps_all_ones(self):
        data = np.tile(np.array([1.0, 2.0])[:, None, None], (1, 2, 2))
        f = Tensor3(data)
        t = feature_correlation(f, f)
        assert np.allclose(t.data, 1.0, atol=1e-12)

    def test_orthogonal_row_is_zero(self):
        # position 0 of f_i is orthogonal to both positions of f_j
        fi = np.zeros((2, 1, 2))
        fi[0, 0, 0] = 1.0
        fi[1, 0, 1] = 1.0
        fj = np.zeros((2, 1, 2))
        fj[1, 0, 0] = 1.0
        fj[1, 0, 1] = 1.0
        t = feature_correlation(Tensor3(fi), Tensor3(fj))
        assert np.allclose(t.data[0], 0.0)  # first position orthogonal to all of f_j

    def test_against_scalar_oracle(self):
        rng = Rng(17)
        f_i = random_tensor3(rng, 2, 2, 2)
        f_j = random_tensor3(rng, 2, 2, 2)
        t = feature_correlation(f_i, f_j)
        for p in range(4):
            for q in range(4):
                a = f_i.at(GridIndex(p // 2, p % 2))
                b = f_j.at(GridIndex(q // 2, q % 2))
                assert t.data[p, q] == pytest.approx(cosine_similarity(a, b), abs=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            feature_correlation(
                Tensor3(np.zeros((2, 1, 1))), Tensor3(np.zeros((3, 1, 1)))
            )

    def test_transpose_symmetry_exact(self):
        rng = Rng(3)
        f_i = random_tensor3(rng, 3, 2, 3)
        f_j = random_tensor3(rng, 3, 3, 2)
        ab = feature_correlation(f_i, f_j).data
        ba = feature_correlation(f_j, f_i).data
        assert np.array_equal(ab, ba.T)

    def test_sampled_restriction_is_bitwise(self):
        rng = Rng(5)
        f_i = random_tensor3(rng, 4, 3, 3)
        f_j = random_tensor3(rng, 4, 3, 3)
        full = feature_correlation(f_i, f_j).data
        si = SampleSet((GridIndex(0, 1), GridIndex(2, 2)))
        sj = SampleSet((GridIndex(1, 0), GridIndex(0, 0), GridIndex(2, 1)))
        sampled = feature_correlation(f_i, f_j, si, sj).data
        li = [0 * 3 + 1, 2 * 3 + 2]
        lj = [1 * 3 + 0, 0, 2 * 3 + 1]
        assert np.array_equal(sampled, full[np.ix_(li, lj)])


class TestDepthCorrelation:
    def test_unit_product(self):
        d = Tensor2(np.ones((1, 1)))
        assert depth_correlation(d, d).data[0, 0] == 1.0

    def test_zero_annihilates_row(self):
        d_i = Tensor2(np.array([[0.0, 0.5]]))
        d_j = Tensor2(np.array([[0.3, 0.9]]))
        t = depth_correlation(d_i, d_j)
        assert np.all(t.data[0] == 0.0)

    def test_direct_substitution(self):
        d_i = Tensor2(np.array([[0.5]]))
        d_j = Tensor2(np.array([[0.8]]))
        assert depth_correlation(d_i, d_j).data[0, 0] == pytest.approx(0.4, abs=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            depth_correlation(Tensor2(np.array([[1.5]])), Tensor2(np.array([[0.5]])))

    def test_sampling_permutation_consistency(self):
        rng = Rng(8)
        d_i = Tensor2(rng.uniforms((3, 3)))
        d_j = Tensor2(rng.uniforms((3, 3)))
        si = SampleSet((GridIndex(0, 0), GridIndex(1, 1), GridIndex(2, 0)))
        sj = SampleSet((GridIndex(2, 2), GridIndex(0, 1)))
        t = depth_correlation(d_i, d_j, si, sj).data
        si_perm = SampleSet(tuple(reversed(si.indices)))
        t_perm = depth_correlation(d_i, d_j, si_perm, sj).data
        assert np.array_equal(t_perm, t[::-1])


class TestCentering:
    def test_constant_becomes_zero(self):
        t = center_rows(CorrelationTensor(np.full((3, 4), 0.7)))
        assert np.allclose(t.data, 0.0, atol=1e-15)

    def test_zero_mean_row_unchanged(self):
        t = center_rows(CorrelationTensor(np.array([[1.0, -1.0]])))
        assert t.data.tolist() == [[1.0, -1.0]]

    def test_hand_value(self):
        t = center_rows(CorrelationTensor(np.array([[0.2, 0.4, 0.6]])))
        assert np.allclose(t.data, [[-0.2, 0.0, 0.2]], atol=1e-12)

    def test_rows_sum_to_zero(self):
        rng = Rng(21)
        m = rng.uniforms((5, 7), -1.0, 1.0)
        t = center_rows(CorrelationTensor(m))
        assert np.all(np.abs(t.data.sum(axis=1)) <= 1e-6 * 7)
