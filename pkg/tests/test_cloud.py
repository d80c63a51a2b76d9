import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from glfm.cloud import CloudParseError, PointCloud, read_cloud, remove_dominant_plane, write_cloud
from glfm.rng import SeededRng


def test_ascii_ply_three_vertices(tmp_path):
    p = tmp_path / "tri.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n")
    c = read_cloud(p)
    assert np.array_equal(c.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert c.mask is None


def test_xyz_two_points(tmp_path):
    p = tmp_path / "two.xyz"
    p.write_text("0 0 0\n1 2 3")
    assert np.array_equal(read_cloud(p).points, [[0, 0, 0], [1, 2, 3]])


def test_xyz_fourth_column_is_mask(tmp_path):
    p = tmp_path / "m.xyz"
    p.write_text("0 0 0 1\n1 2 3 0\n")
    assert list(read_cloud(p).mask) == [1, 0]


def test_extra_properties_ignored_and_anomaly_becomes_mask(tmp_path):
    p = tmp_path / "props.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nproperty float intensity\nproperty int anomaly\nend_header\n"
                 "0 0 0 0.5 1\n1 1 1 0.7 0\n")
    c, props = read_cloud(p, with_properties=True)
    assert list(c.mask) == [1, 0]
    assert np.allclose(props["intensity"], [0.5, 0.7])


@pytest.mark.parametrize("fmt", ["ply-binary-le", "ply-ascii", "xyz"])
def test_empty_and_single_point(tmp_path, fmt):
    ext = ".xyz" if fmt == "xyz" else ".ply"
    for pts in (np.zeros((0, 3)), np.array([[1.5, -2.25, 3.0]])):
        path = tmp_path / f"c{len(pts)}{ext}"
        write_cloud(PointCloud(pts), path, format=fmt)
        back = read_cloud(path, format=fmt)
        assert back.points.shape == pts.shape
        assert np.array_equal(back.points, pts)


def test_binary_roundtrip_100_random_clouds(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        n = int(rng.integers(1, 300))
        pts = rng.normal(scale=10 ** rng.uniform(-3, 3), size=(n, 3))
        mask = rng.integers(0, 2, n) if i % 2 else None
        path = tmp_path / f"r{i}.ply"
        write_cloud(PointCloud(pts, mask), path)
        back = read_cloud(path)
        assert back.points.tobytes() == pts.tobytes()
        if mask is not None:
            assert np.array_equal(back.mask, mask)


def test_ascii_roundtrip_nine_digits(tmp_path):
    pts = np.random.default_rng(1).normal(size=(1000, 3))
    path = tmp_path / "a.ply"
    write_cloud(PointCloud(pts), path, format="ply-ascii")
    back = read_cloud(path)
    assert np.allclose(back.points, pts, rtol=1e-9, atol=0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 40), st.just(3)),
              elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)))
def test_binary_roundtrip_property(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("rt") / "c.ply"
    write_cloud(PointCloud(pts), path)
    assert read_cloud(path).points.tobytes() == np.ascontiguousarray(pts).tobytes()


def test_parse_errors_name_offsets(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n"
                   "property float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n")
    with pytest.raises(CloudParseError, match="line"):
        read_cloud(bad)
    nan = tmp_path / "nan.xyz"
    nan.write_text("0 0 0\nnan 0 0\n")
    with pytest.raises(CloudParseError, match="line 2"):
        read_cloud(nan)
    trunc = tmp_path / "trunc.ply"
    write_cloud(PointCloud(np.ones((4, 3))), trunc)
    trunc.write_bytes(trunc.read_bytes()[:-5])
    with pytest.raises(CloudParseError, match="byte"):
        read_cloud(trunc)
    hdr = tmp_path / "hdr.ply"
    hdr.write_text("ply\nformat nonsense 1.0\nend_header\n")
    with pytest.raises(CloudParseError):
        read_cloud(hdr)


def test_pointcloud_invariants():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], mask=[1, 0])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], mask=[2])
    c = PointCloud([[0, 0, 0]])
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_plane_removal_keeps_sphere():
    rng = np.random.default_rng(2)
    plane = np.c_[rng.uniform(-1, 1, (900, 2)), np.zeros(900)]
    v = rng.normal(size=(100, 3))
    ball = 0.2 * v / np.linalg.norm(v, axis=1, keepdims=True) + [0, 0, 0.5]
    pts = np.vstack([plane, ball])
    out = remove_dominant_plane(PointCloud(pts), 0.01, 0.5, SeededRng(0))
    assert np.array_equal(out.points, ball)


def test_plane_removal_coplanar_and_general_position():
    rng = np.random.default_rng(3)
    flat = np.c_[rng.uniform(size=(50, 2)), np.zeros(50)]
    assert len(remove_dominant_plane(PointCloud(flat), 0.01, 0.5, SeededRng(0))) == 0
    pts = rng.normal(size=(10, 3))
    out = remove_dominant_plane(PointCloud(pts), 0.01, 0.9, SeededRng(0))
    assert np.array_equal(out.points, pts)


def test_plane_removal_is_ordered_subset():
    rng = np.random.default_rng(4)
    pts = np.vstack([np.c_[rng.uniform(size=(300, 2)), rng.normal(0, 0.001, 300)],
                     rng.uniform(size=(100, 3)) + [0, 0, 0.1]])
    pts = pts[rng.permutation(len(pts))]
    mask = (pts[:, 2] > 0.05).astype(np.uint8)
    out = remove_dominant_plane(PointCloud(pts, mask), 0.005, 0.3, SeededRng(7))
    idx = [int(np.flatnonzero((pts == p).all(axis=1))[0]) for p in out.points]
    assert idx == sorted(idx)
    assert np.array_equal(out.mask, mask[idx])


def test_rng_same_seed_same_draws():
    a, b = SeededRng(123), SeededRng(123)
    for _ in range(5):
        assert np.array_equal(a.uniform(size=7), b.uniform(size=7))
        assert a.integers(1000) == b.integers(1000)
    assert np.array_equal(SeededRng(9).split(4).normal(size=3), SeededRng(9).split(4).normal(size=3))
    assert not np.array_equal(SeededRng(9).split(4).normal(size=3),
                              SeededRng(9).split(5).normal(size=3))
    with pytest.raises(ValueError):
        SeededRng(-1)
