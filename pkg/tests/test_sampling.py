import numpy as np
import pytest

from depthseg.core import GridIndex, Rng, Tensor2
from depthseg.sampling import (
    PointCloud,
    SampleSet,
    depth_to_pointcloud,
    farthest_point_sample,
    pairwise_sq_dists,
    random_sample,
)


def brute_force_fps(points: np.ndarray, k: int, init: int) -> list[int]:
    """Independent greedy max-min oracle: recompute all distances each step."""
    chosen = [init]
    n = len(points)
    for _ in range(k - 1):
        best_idx, best_dist = None, -1.0
        for cand in range(n):
            if cand in chosen:
                continue
            dmin = min(
                float(((points[cand] - points[c]) ** 2).sum()) for c in chosen
            )
            if dmin > best_dist:  # strict: ties keep the lowest index
                best_dist = dmin
                best_idx = cand
        chosen.append(best_idx)
    return chosen


def random_cloud(rng: Rng, h: int, w: int, scale: float = 1.0) -> PointCloud:
    return depth_to_pointcloud(Tensor2(rng.uniforms((h, w))), scale)


def min_pairwise_dist(cloud: PointCloud, samples: SampleSet) -> float:
    w = cloud.grid[1]
    pts = cloud.points[[r * w + c for r, c in samples.indices]]
    best = np.inf
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            best = min(best, float(np.sqrt(((pts[i] - pts[j]) ** 2).sum())))
    return best


class TestPointCloud:
    def test_degenerate_axes(self):
        cloud = depth_to_pointcloud(Tensor2(np.array([[0.5]])), 1.0)
        assert cloud.points.tolist() == [[0.0, 0.0, 0.5]]

    def test_unit_square_corners(self):
        cloud = depth_to_pointcloud(Tensor2(np.zeros((2, 2))), 1.0)
        assert cloud.points.tolist() == [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]

    def test_depth_scale(self):
        d = Tensor2(np.array([[0.0, 1.0], [0.0, 1.0]]))
        cloud = depth_to_pointcloud(d, 2.0)
        assert cloud.points[:, 2].tolist() == [0.0, 2.0, 0.0, 2.0]

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            depth_to_pointcloud(Tensor2(np.zeros((1, 1))), 0.0)


class TestFps:
    def test_two_points_selects_both(self):
        cloud = depth_to_pointcloud(Tensor2(np.array([[0.1, 0.9]])))
        for init in (0, 1):
            s = farthest_point_sample(cloud, 2, init)
            assert sorted((r * 2 + c) for r, c in s.indices) == [0, 1]

    def test_collinear_depths_pick_far_end(self):
        # same (x, y) column, depths 0, 0.5, 1: from 0 the farthest is 1
        d = Tensor2(np.array([[0.0], [0.5], [1.0]]))
        cloud = PointCloud(
            np.column_stack(
                [np.zeros(3), np.zeros(3), d.flat()]
            ),
            (3, 1),
        )
        s = farthest_point_sample(cloud, 2, 0)
        assert s.indices[1] == GridIndex(2, 0)

    def test_oracle_equivalence_50_clouds(self):
        rng = Rng(2024)
        for trial in range(50):
            h = 2 + rng.randint(7)
            w = 2 + rng.randint(7)
            if h * w > 64:
                continue
            k = 1 + rng.randint(min(16, h * w))
            init = rng.randint(h * w)
            cloud = random_cloud(rng, h, w, scale=0.5 + rng.random())
            got = [r * w + c for r, c in farthest_point_sample(cloud, k, init).indices]
            assert got == brute_force_fps(cloud.points, k, init), f"trial {trial}"

    def test_matches_precomputed_matrix_path(self):
        rng = Rng(77)
        cloud = random_cloud(rng, 6, 6)
        sq = pairwise_sq_dists(cloud)
        a = farthest_point_sample(cloud, 12, 3)
        b = farthest_point_sample(cloud, 12, 3, pairwise_sq=sq)
        assert a == b

    def test_greedy_step_invariant(self):
        rng = Rng(5)
        cloud = random_cloud(rng, 5, 5)
        k = 10
        s = farthest_point_sample(cloud, k, 0)
        lins = [r * 5 + c for r, c in s.indices]
        pts = cloud.points
        for t in range(1, k):
            selected = lins[:t]
            best = max(
                min(float(((pts[c] - pts[s]) ** 2).sum()) for s in selected)
                for c in range(25)
                if c not in selected
            )
            actual = min(
                float(((pts[lins[t]] - pts[s]) ** 2).sum()) for s in selected
            )
            assert actual == best

    def test_no_duplicates_and_deterministic(self):
        rng = Rng(9)
        cloud = random_cloud(rng, 8, 8)
        a = farthest_point_sample(cloud, 20, 7)
        b = farthest_point_sample(cloud, 20, 7)
        assert a == b
        assert len(set(a.indices)) == 20

    def test_k_too_large(self):
        cloud = depth_to_pointcloud(Tensor2(np.zeros((2, 2))))
        with pytest.raises(ValueError):
            farthest_point_sample(cloud, 5, 0)

    def test_coverage_dominance(self):
        # FPS spreads samples at least as well as random selection
        h = w = 14
        k = 81
        wins = 0
        trials = 100
        for t in range(trials):
            rng = Rng(1000 + t)
            cloud = random_cloud(rng, h, w)
            fps = farthest_point_sample(cloud, k, rng.randint(h * w))
            rnd = random_sample(h, w, k, rng)
            if min_pairwise_dist(cloud, fps) > min_pairwise_dist(cloud, rnd):
                wins += 1
        assert wins >= 95

    def test_concentration_at_depth_edge(self):
        # sharp step with a short ramp: FPS picks the ramp cells more often
        # than the uniform-rate baseline
        h = w = 14
        col = np.full(w, 0.1)
        col[7:] = 0.9
        col[6] = 0.3
        col[7] = 0.7
        d = Tensor2(np.tile(col, (h, 1)))
        cloud = depth_to_pointcloud(d, depth_scale=2.0)
        band = {c for c in range(w) if abs(c - 6) <= 2 or abs(c - 7) <= 2}
        k = 20
        hits = 0
        trials = 20
        for t in range(trials):
            rng = Rng(t)
            s = farthest_point_sample(cloud, k, rng.randint(h * w))
            hits += sum(1 for _, c in s.indices if c in band)
        fps_fraction = hits / (trials * k)
        # exact uniform-rate oracle: E[fraction in band] = |band cells| / n
        uniform_fraction = (len(band) * h) / (h * w)
        assert fps_fraction > uniform_fraction


class TestRandomSample:
    def test_exhaustive_permutation(self):
        s = random_sample(2, 3, 6, Rng(1))
        assert sorted(r * 3 + c for r, c in s.indices) == list(range(6))

    def test_deterministic(self):
        assert random_sample(4, 4, 5, Rng(42)) == random_sample(4, 4, 5, Rng(42))

    def test_too_many(self):
        with pytest.raises(ValueError):
            random_sample(2, 2, 5, Rng(0))

    def test_uniformity_3_sigma(self):
        h = w = 4
        k = 4
        trials = 10_000
        rng = Rng(7)
        counts = np.zeros(h * w)
        for _ in range(trials):
            for r, c in random_sample(h, w, k, rng).indices:
                counts[r * w + c] += 1
        p = k / (h * w)
        sigma = np.sqrt(p * (1 - p) * trials)
        assert np.all(np.abs(counts - trials * p) <= 3 * sigma)
