import numpy as np
import pytest

from cylpano.errors import DimensionMismatchError, NoValidProjectionError
from cylpano.geometry import rotation_z
from cylpano.grid import CylGridSpec, PointCloud, extreme_points_batch, voxelize
from cylpano.synth import ring_camera
from cylpano.tokens import (
    FeatureMap,
    SpeParams,
    VoxelFeatures,
    aggregate_image_feature,
    build_tokens,
    centroid_image_feature,
    corner_distances,
    fuse_token,
    scale_encoding,
    spe,
    spe_batch,
)

SPEC = CylGridSpec(12, 8, 4, (0.0, 24.0), (-2.0, 2.0))


def const_fmap(value, dim=4, hw=(16, 16), image=(32, 32)):
    data = np.full((hw[0], hw[1], dim), value, dtype=np.float32)
    return FeatureMap(data, image[0], image[1])


class TestAggregation:
    def test_identical_cells_return_constant(self):
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)
        pts = np.array([[5.0, 0.0, 0.0], [5.0, 0.01, 0.01], [5.0, -0.01, 0.0]])
        out = aggregate_image_feature(pts, const_fmap(3.5), cam)
        assert np.allclose(out, 3.5)

    def test_mean_of_two_cells(self):
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)
        fmap = const_fmap(0.0, dim=1, hw=(32, 32))
        fmap.data[:, :16, 0] = 0.0
        fmap.data[:, 16:, 0] = 2.0
        # one point projects left of center, one right
        pts = np.array([[5.0, 1.0, 0.0], [5.0, -1.0, 0.0]])
        out = aggregate_image_feature(pts, fmap, cam)
        assert out[0] == pytest.approx(1.0)

    def test_no_valid_projection(self):
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)
        with pytest.raises(NoValidProjectionError):
            aggregate_image_feature(np.array([[-5.0, 0.0, 0.0]]), const_fmap(1.0), cam)

    def test_oracle_equality_over_random_voxels(self):
        from cylpano.geometry import valid_projections

        rng = np.random.default_rng(0)
        cam = ring_camera(0.0, 64, 48, 40.0, 0.5)
        fmap = FeatureMap(rng.standard_normal((12, 16, 8)).astype(np.float32), 64, 48)
        worst = 0.0
        for _ in range(1000):
            pts = np.column_stack(
                [rng.uniform(2, 20, (5, 1)), rng.uniform(-3, 3, (5, 1)), rng.uniform(-1, 2, (5, 1))]
            )
            uv, _, valid = valid_projections(pts, cam)
            if not valid.any():
                continue
            got = aggregate_image_feature(pts, fmap, cam)
            acc = np.zeros(8)
            n = 0
            for i in np.flatnonzero(valid):
                col = int(np.floor(uv[i, 0] * 16 / 64))
                row = int(np.floor(uv[i, 1] * 12 / 48))
                acc += fmap.data[row, col].astype(np.float64)
                n += 1
            worst = max(worst, np.abs(got - acc / n).max() / max(np.abs(acc / n).max(), 1e-12))
        assert worst < 1e-6

    def test_bilinear_interpolates_between_cells(self):
        fmap = FeatureMap(np.arange(4, dtype=np.float32).reshape(2, 2, 1), 2, 2)
        mid = fmap.sample(np.array([[1.0, 1.0]]), bilinear=True)
        assert mid[0, 0] == pytest.approx(np.mean([0, 1, 2, 3]))


class TestSpe:
    def test_deterministic_for_identical_voxels(self):
        params = SpeParams.create(SPEC, dim=16, seed=3)
        corners = extreme_points_batch(np.array([[4, 2, 1]]), SPEC)[0]
        assert np.array_equal(spe(corners, params), spe(corners.copy(), params))

    def test_distance_vector_invariant_under_z_rotation(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            idx = np.array(
                [[rng.integers(0, SPEC.r_bins), rng.integers(0, SPEC.theta_bins), rng.integers(0, SPEC.z_bins)]]
            )
            corners = extreme_points_batch(idx, SPEC)[0]
            rot = rotation_z(rng.uniform(0, 2 * np.pi))
            d0 = corner_distances(corners)
            d1 = corner_distances(corners @ rot.T)
            assert np.abs(d0 - d1).max() < 1e-9

    def test_phi_bit_identical_for_identical_distances(self):
        params = SpeParams.create(SPEC, dim=32, seed=5)
        d = np.random.default_rng(2).uniform(0, 3, 8)
        assert np.array_equal(scale_encoding(d, params), scale_encoding(d.copy(), params))

    def test_degenerate_corners_reduce_to_zero_distance_term(self):
        params = SpeParams.create(SPEC, dim=16, seed=7)
        point = np.array([3.0, 1.0, 0.5])
        corners = np.tile(point, (8, 1))
        from cylpano.tokens import position_encoding

        expected = position_encoding(point[None], params)[0] + scale_encoding(np.zeros(8), params)[0]
        assert np.allclose(spe(corners, params), expected, atol=1e-12)

    def test_injective_on_small_grid(self):
        spec = CylGridSpec(24, 18, 8, (0.0, 50.0), (-5.0, 3.0))
        params = SpeParams.create(spec, dim=16, seed=0)
        idx = np.stack(np.meshgrid(
            np.arange(24), np.arange(18), np.arange(8), indexing="ij"
        ), axis=-1).reshape(-1, 3)
        emb = spe_batch(extreme_points_batch(idx, spec), params)
        hashes = {np.round(row, 9).tobytes() for row in emb}
        assert len(hashes) == len(idx)

    def test_weights_file_round_trip(self, tmp_path):
        from cylpano.formats import read_spe_params, write_spe_params

        params = SpeParams.create(SPEC, dim=24, seed=11)
        write_spe_params(tmp_path / "w.spew", params)
        loaded = read_spe_params(tmp_path / "w.spew")
        corners = extreme_points_batch(np.array([[3, 3, 2]]), SPEC)
        assert np.array_equal(spe_batch(corners, params), spe_batch(corners, loaded))


class TestFuseToken:
    def test_zero_embedding(self):
        f3d = np.arange(4.0)
        f2d = np.arange(4.0) * 2
        out = fuse_token(f3d, f2d, np.zeros(4))
        assert np.array_equal(out, np.concatenate([f3d, f2d]))

    def test_zero_content_gives_embedding_twice(self):
        s = np.arange(4.0)
        assert np.array_equal(fuse_token(np.zeros(4), np.zeros(4), s), np.concatenate([s, s]))

    def test_structural_length(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = int(rng.integers(1, 40))
            out = fuse_token(rng.normal(size=d), rng.normal(size=d), rng.normal(size=d))
            assert out.shape == (2 * d,)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            fuse_token(np.zeros(3), np.zeros(4), np.zeros(4))


class TestBuildTokens:
    def _scene(self, rng, n=300):
        xyz = np.column_stack([rng.uniform(-20, 20, (n, 2)), rng.uniform(-2, 2, n)])
        cloud = PointCloud(xyz, rng.random(n))
        return voxelize(cloud, SPEC)

    def test_single_voxel_single_camera(self):
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)
        grid = voxelize(PointCloud(np.array([[5.0, 0.0, 0.0]]), np.zeros(1)), SPEC)
        params = SpeParams.create(SPEC, dim=4, seed=0)
        feats = VoxelFeatures.for_grid(grid, np.ones((1, 4)))
        tokens = build_tokens(grid, feats, [const_fmap(2.0)], [cam], params)
        assert len(tokens) == 1
        assert tokens[0].content.shape == (8,)
        assert tokens.image_valid[0]

    def test_two_cameras_identical_features_match_single(self):
        rng = np.random.default_rng(5)
        grid = self._scene(rng)
        params = SpeParams.create(SPEC, dim=4, seed=1)
        feats = VoxelFeatures.for_grid(grid, rng.normal(size=(grid.num_voxels, 4)))
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)
        fmap = const_fmap(1.25)
        one = build_tokens(grid, feats, [fmap], [cam], params)
        two = build_tokens(grid, feats, [fmap, fmap], [cam, cam], params)
        assert np.allclose(one.content, two.content)

    def test_invisible_voxel_gets_zero_image_half_and_flag(self):
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)  # looks along +x
        grid = voxelize(PointCloud(np.array([[-5.0, 0.0, 0.0]]), np.zeros(1)), SPEC)
        params = SpeParams.create(SPEC, dim=4, seed=2)
        feats = VoxelFeatures.for_grid(grid, np.zeros((1, 4)))
        tokens = build_tokens(grid, feats, [const_fmap(9.0)], [cam], params)
        assert not tokens.image_valid[0]
        assert np.allclose(tokens.content[0, 4:] - tokens.spe[0], 0.0)

    def test_shared_embedding_across_both_halves(self):
        rng = np.random.default_rng(6)
        grid = self._scene(rng)
        params = SpeParams.create(SPEC, dim=8, seed=3)
        f3d = rng.normal(size=(grid.num_voxels, 8))
        cam = ring_camera(0.0, 32, 32, 16.0, 0.0)
        fmap = FeatureMap(rng.standard_normal((8, 8, 8)).astype(np.float32), 32, 32)
        tokens = build_tokens(grid, VoxelFeatures.for_grid(grid, f3d), [fmap], [cam], params)
        # recover the raw image means from a build with zeroed lidar features
        zeroed = build_tokens(grid, VoxelFeatures.for_grid(grid, np.zeros_like(f3d)),
                              [fmap], [cam], params)
        f2d = zeroed.content[:, 8:] - zeroed.spe
        # both halves must be shifted by the identical embedding vector
        assert np.allclose(tokens.content[:, :8] - f3d, tokens.content[:, 8:] - f2d, atol=1e-12)
        assert np.allclose(tokens.content[:, :8] - f3d, tokens.spe, atol=1e-12)

    def test_tokens_ordered_by_voxel_index(self):
        rng = np.random.default_rng(7)
        grid = self._scene(rng)
        params = SpeParams.create(SPEC, dim=4, seed=4)
        feats = VoxelFeatures.for_grid(grid, np.zeros((grid.num_voxels, 4)))
        tokens = build_tokens(grid, feats, [], [], params)
        flat = SPEC.flatten(tokens.indices3)
        assert (np.diff(flat) > 0).all()

    def test_physical_points_beat_virtual_center(self):
        # Far wide voxel: centroid outside the narrow image, points inside.
        spec = CylGridSpec(25, 4, 4, (0.0, 50.0), (-5.0, 3.0))
        cam = ring_camera(0.0, 640, 360, 2000.0, 0.0)
        theta = 0.03
        pts = np.array([[49.0 * np.cos(theta), 49.0 * np.sin(theta), 0.0],
                        [49.5 * np.cos(theta), 49.5 * np.sin(theta), 0.1]])
        grid = voxelize(PointCloud(pts, np.zeros(2)), spec)
        fmap = FeatureMap(np.full((36, 64, 4), 5.0, dtype=np.float32), 640, 360)
        agg = aggregate_image_feature(pts, fmap, cam)
        assert np.allclose(agg, 5.0)
        corners = extreme_points_batch(grid.indices3, spec)[0]
        with pytest.raises(NoValidProjectionError):
            centroid_image_feature(corners, fmap, cam)

    def test_feature_coverage_validated(self):
        rng = np.random.default_rng(8)
        grid = self._scene(rng)
        params = SpeParams.create(SPEC, dim=4, seed=5)
        with pytest.raises(DimensionMismatchError):
            VoxelFeatures.for_grid(grid, np.zeros((grid.num_voxels - 1, 4)))
        with pytest.raises(DimensionMismatchError):
            build_tokens(grid, VoxelFeatures.for_grid(grid, np.zeros((grid.num_voxels, 5))), [], [], params)
