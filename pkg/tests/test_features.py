import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from glfm import toy
from glfm.cloud import PointCloud
from glfm.features import (ExtractorConfig, FeatureError, FeatureSet, extract_local_features,
                           fpfh_at, load_external_features, pool_global, sample_patch_centers,
                           save_features)
from glfm.rng import SeededRng
from oracles import direct_fpfh, direct_normals, quadratic_fps


def test_fps_all_points_when_m_equals_n():
    pts = np.random.default_rng(0).normal(size=(40, 3))
    assert sorted(sample_patch_centers(pts, 40)) == list(range(40))


def test_fps_square_corners():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    # all corners tie for the centroid, so index 0 starts; its diagonal follows
    assert list(sample_patch_centers(sq, 2)) == [0, 3]


def test_fps_matches_quadratic_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        pts = rng.normal(size=(500, 3))
        assert list(sample_patch_centers(pts, 50)) == quadratic_fps(pts, 50)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fps_permutation_only_relabels(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(120, 3))
    perm = rng.permutation(120)
    a = sample_patch_centers(pts, 15)
    b = sample_patch_centers(pts[perm], 15)
    assert np.array_equal(perm[b], a)


def test_fpfh_matches_direct_oracle():
    cloud = toy.sphere(300, rng=SeededRng(2))
    pts = cloud.points
    normals = direct_normals(pts, 10)
    centers = sample_patch_centers(pts, 20)
    radius = 0.15
    desc, _ = fpfh_at(pts, centers, radius, normals=normals)
    ref = direct_fpfh(pts, normals, centers, radius)
    assert np.allclose(desc, ref, atol=1e-9)


def test_block_sums():
    cloud = toy.plane_patch(1500, rng=SeededRng(0))
    fs = extract_local_features(cloud)
    blocks = fs.local.reshape(len(fs), 3, 11).sum(axis=2)
    assert np.allclose(blocks[blocks > 0], 2.0)


def test_rigid_motion_invariance():
    cloud = toy.sphere(1500, rng=SeededRng(3))
    base = extract_local_features(cloud).local
    rots = Rotation.random(10, random_state=4).as_matrix()
    shifts = np.random.default_rng(5).normal(scale=3, size=(10, 3))
    for rot, t in zip(rots, shifts):
        moved = extract_local_features(PointCloud(cloud.points @ rot.T + t)).local
        assert np.abs(moved - base).max() < 1e-6


def test_plane_descriptors_concentrate():
    for seed in range(3):
        fs = extract_local_features(toy.plane_patch(2000, noise=0.0, rng=SeededRng(seed)))
        rows = fs.local
        assert pdist(rows).max() < 0.1 * np.linalg.norm(rows, axis=1).mean()
        # coplanar pairs: theta and alpha in the middle bins, phi in the first
        assert np.allclose(rows[:, [5, 16, 22]], 2.0)


def test_noisy_plane_interior_matches_direct_oracle():
    cloud = toy.plane_patch(400, rng=SeededRng(9))
    pts = cloud.points
    normals = direct_normals(pts, 10)
    centers = sample_patch_centers(pts, 15)
    desc, _ = fpfh_at(pts, centers, 0.15, normals=normals)
    assert np.allclose(desc, direct_fpfh(pts, normals, centers, 0.15), atol=1e-9)


def test_plane_and_sphere_separate():
    for seed in range(10):
        g_plane = extract_local_features(toy.plane_patch(2000, rng=SeededRng(seed))).global_
        g_plane2 = extract_local_features(
            toy.plane_patch(2000, rng=SeededRng(seed + 50))).global_
        g_sphere = extract_local_features(toy.sphere(2000, rng=SeededRng(seed))).global_
        assert np.linalg.norm(g_plane - g_sphere) > 3 * np.linalg.norm(g_plane - g_plane2)


def test_single_patch_global_equals_local():
    fs = extract_local_features(toy.sphere(400, rng=SeededRng(0)),
                                ExtractorConfig(patch_count=1))
    assert np.array_equal(fs.global_, fs.local[0])


def test_tiny_radius_fails_with_message():
    cloud = toy.sphere(400, rng=SeededRng(0))
    with pytest.raises(FeatureError, match="no neighbours"):
        extract_local_features(cloud, ExtractorConfig(fpfh_radius=1e-9))


def test_extractor_id_changes_with_config():
    assert ExtractorConfig().extractor_id != ExtractorConfig(fpfh_radius=0.1).extractor_id


def test_pool_global_examples():
    assert np.array_equal(pool_global([[1.0, 2.0], [3.0, 4.0]]), [2.0, 3.0])
    assert np.array_equal(pool_global([[5.0, -1.0]]), [5.0, -1.0])
    rng = np.random.default_rng(7)
    for _ in range(100):
        rows = rng.normal(size=(int(rng.integers(1, 50)), 4))
        ref = [math.fsum(rows[:, j]) / len(rows) for j in range(4)]
        assert np.allclose(pool_global(rows), ref, rtol=0, atol=1e-12)


def test_featureset_invariants():
    with pytest.raises(FeatureError):
        FeatureSet(np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(FeatureError):
        FeatureSet(np.zeros((1, 3)), [[np.nan]])
    with pytest.raises(FeatureError):
        FeatureSet(np.zeros((2, 3)), np.zeros((1, 4)))


def test_gft_one_row(tmp_path):
    path = tmp_path / "one.gft"
    path.write_bytes(b"GFT1" + struct.pack("<II", 1, 2) + np.array([3, 4, 0, 0, 0], "<f4").tobytes())
    fs = load_external_features(path)
    assert np.array_equal(fs.local, [[3, 4]])
    assert np.array_equal(fs.global_, [3, 4])


def test_gft_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    for i in range(20):
        m, d = int(rng.integers(1, 40)), int(rng.integers(1, 70))
        local = rng.normal(size=(m, d)).astype(np.float32).astype(np.float64)
        centers = rng.normal(size=(m, 3)).astype(np.float32).astype(np.float64)
        path = tmp_path / f"f{i}.gft"
        save_features(FeatureSet(centers, local), path)
        back = load_external_features(path)
        assert back.local.tobytes() == local.tobytes()
        assert back.centers.tobytes() == centers.tobytes()


def test_gft_errors_name_byte_offsets(tmp_path):
    path = tmp_path / "f.gft"
    save_features(FeatureSet(np.zeros((3, 3)), np.ones((3, 5))), path)
    data = path.read_bytes()
    cases = {
        "trunc.gft": data[:30],
        "short.gft": data[:8],
        "magic.gft": b"XXXX" + data[4:],
        "tail.gft": data + b"\0",
        "nan.gft": data[:16] + np.array([np.nan], "<f4").tobytes() + data[20:],
    }
    for name, blob in cases.items():
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(FeatureError, match="byte"):
            load_external_features(p)
    with pytest.raises(FeatureError, match="byte 16"):
        load_external_features(tmp_path / "nan.gft")
