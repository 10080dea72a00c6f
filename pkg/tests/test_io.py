import numpy as np
import pytest

from n2nsdf.io import DataError, ParseError, read_mesh, read_point_cloud, write_mesh, write_point_cloud
from n2nsdf.shapes import Sphere
from n2nsdf.surfacing import mesh_from_function


def test_three_line_xyz(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0.5 1 -2\n3 4 5 0.9 0.1\n# comment\n-1e-3 2.5 7\n")
    np.testing.assert_array_equal(read_point_cloud(p), [[0.5, 1, -2], [3, 4, 5], [-1e-3, 2.5, 7]])


def test_xyz_round_trip_and_period_decimal(tmp_path):
    X = np.random.default_rng(0).normal(size=(50, 3))
    write_point_cloud(X, tmp_path / "x.xyz")
    text = (tmp_path / "x.xyz").read_text()
    assert "," not in text
    np.testing.assert_array_equal(read_point_cloud(tmp_path / "x.xyz"), X)


def test_binary_ply_round_trip_is_bit_exact(tmp_path):
    X = np.random.default_rng(1).normal(size=(1000, 3)) * 1e3
    write_point_cloud(X, tmp_path / "x.ply")
    back = read_point_cloud(tmp_path / "x.ply")
    assert back.tobytes() == X.tobytes()


def test_ascii_ply_round_trip(tmp_path):
    X = np.random.default_rng(2).normal(size=(20, 3))
    write_point_cloud(X, tmp_path / "x.ply", format="ply-ascii")
    np.testing.assert_array_equal(read_point_cloud(tmp_path / "x.ply"), X)


def test_ply_extra_properties_are_ignored(tmp_path):
    p = tmp_path / "c.ply"
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty uchar red\nproperty float x\n"
              "property float y\nproperty float z\nproperty float nx\nend_header\n")
    rows = np.zeros(2, dtype=[("red", "u1"), ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("nx", "<f4")])
    rows["x"], rows["y"], rows["z"] = [1, 2], [3, 4], [5, 6]
    p.write_bytes(header.encode() + rows.tobytes())
    np.testing.assert_array_equal(read_point_cloud(p), [[1, 3, 5], [2, 4, 6]])


def test_writes_are_deterministic(tmp_path):
    X = np.random.default_rng(3).normal(size=(100, 3))
    for ext in ("xyz", "ply"):
        write_point_cloud(X, tmp_path / f"a.{ext}")
        write_point_cloud(X, tmp_path / f"b.{ext}")
        assert (tmp_path / f"a.{ext}").read_bytes() == (tmp_path / f"b.{ext}").read_bytes()


def test_ten_million_points_keep_their_count(tmp_path):
    n = 10_000_000
    p = tmp_path / "big.ply"
    with open(p, "wb") as fh:
        fh.write(f"ply\nformat binary_little_endian 1.0\nelement vertex {n}\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n".encode())
        block = np.arange(3_000_000, dtype="<f4")
        for s in range(0, 3 * n, len(block)):
            fh.write(block[:min(len(block), 3 * n - s)].tobytes())
    X = read_point_cloud(p)
    assert X.shape == (n, 3)
    assert X[-1, 2] == (3 * n - 1) % 3_000_000


def test_malformed_xyz_reports_the_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2 3\n4 5\n")
    with pytest.raises(ParseError) as info:
        read_point_cloud(p)
    assert info.value.line == 2


def test_truncated_binary_ply_reports_an_offset(tmp_path):
    p = tmp_path / "t.ply"
    write_point_cloud(np.zeros((10, 3)), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ParseError) as info:
        read_point_cloud(p)
    assert info.value.offset is not None


def test_bad_ply_header(tmp_path):
    p = tmp_path / "h.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex many\nproperty float x\nend_header\n")
    with pytest.raises(ParseError) as info:
        read_point_cloud(p)
    assert info.value.line == 3
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n")
    with pytest.raises(DataError, match="big-endian"):
        read_point_cloud(p)


def test_empty_and_missing_inputs(tmp_path):
    (tmp_path / "e.xyz").write_text("")
    with pytest.raises(DataError):
        read_point_cloud(tmp_path / "e.xyz")
    with pytest.raises(DataError):
        read_point_cloud(tmp_path / "missing.xyz")
    (tmp_path / "x.pcd").write_text("1 2 3\n")
    with pytest.raises(DataError):
        read_point_cloud(tmp_path / "x.pcd")


@pytest.mark.parametrize("ext", ["obj", "ply"])
def test_mesh_round_trip(tmp_path, ext):
    mesh = mesh_from_function(Sphere(0.5).sdf, 16)
    write_mesh(mesh, tmp_path / f"m.{ext}")
    back = read_mesh(tmp_path / f"m.{ext}")
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
