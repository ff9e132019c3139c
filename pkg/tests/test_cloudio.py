import json
import struct

import numpy as np
import pytest

from shapegrasp.cloudio import (
    CloudFormatError,
    TRACE_SCHEMA,
    export_trace,
    load_cloud,
    load_poses,
    read_trace,
    save_cloud,
    save_poses,
)


class TestXyz:
    def test_three_lines(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("0 0 0\n1 2 3\n-1.5 2e-3 4\n")
        np.testing.assert_array_equal(load_cloud(path), [[0, 0, 0], [1, 2, 3], [-1.5, 0.002, 4]])

    def test_comments_blank_lines_and_extra_columns(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# x y z nx ny nz\n\n1 2 3 0 0 1\n4 5 6 0 1 0  # trailing\n")
        np.testing.assert_array_equal(load_cloud(path), [[1, 2, 3], [4, 5, 6]])

    def test_scale(self, tmp_path):
        path = tmp_path / "mm.xyz"
        path.write_text("1000 0 -500\n")
        np.testing.assert_allclose(load_cloud(path, scale=0.001), [[1.0, 0.0, -0.5]])

    @pytest.mark.parametrize("body, message", [
        ("1 2\n", "malformed"),
        ("1 2 3\n1 2 3 4\n", "malformed"),
        ("1 2 x\n", "non-numeric"),
        ("", "empty"),
        ("# only a comment\n", "empty"),
    ])
    def test_errors(self, tmp_path, body, message):
        path = tmp_path / "bad.xyz"
        path.write_text(body)
        with pytest.raises(CloudFormatError, match=message):
            load_cloud(path)

    def test_nan_row_reported(self, tmp_path):
        path = tmp_path / "nan.xyz"
        path.write_text("0 0 0\n1 1 1\n2 nan 2\n")
        with pytest.raises(CloudFormatError, match="row 2"):
            load_cloud(path)

    def test_round_trip(self, tmp_path, rng):
        pts = rng.standard_normal((40, 3))
        save_cloud(tmp_path / "c.xyz", pts)
        np.testing.assert_array_equal(load_cloud(tmp_path / "c.xyz"), pts)


class TestPly:
    def test_single_vertex_ascii(self, tmp_path):
        path = tmp_path / "one.ply"
        path.write_text("ply\nformat ascii 1.0\ncomment hi\nelement vertex 1\n"
                        "property float x\nproperty float y\nproperty float z\nend_header\n0.5 -1 2\n")
        np.testing.assert_array_equal(load_cloud(path), [[0.5, -1.0, 2.0]])

    def test_binary_round_trip_bitwise(self, tmp_path, rng):
        pts = rng.standard_normal((257, 3)) * np.array([1e-3, 1.0, 1e3])
        save_cloud(tmp_path / "c.ply", pts)
        back = load_cloud(tmp_path / "c.ply")
        assert back.tobytes() == pts.tobytes()

    def test_ascii_round_trip(self, tmp_path, rng):
        pts = rng.standard_normal((20, 3))
        save_cloud(tmp_path / "c.ply", pts, binary=False)
        np.testing.assert_array_equal(load_cloud(tmp_path / "c.ply"), pts)

    def test_binary_with_extra_properties(self, tmp_path):
        header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\n"
                  "property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
                  "property uchar blue\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n")
        body = struct.pack("<fffBBB", 1, 2, 3, 255, 0, 0) + struct.pack("<fffBBB", 4, 5, 6, 0, 255, 0)
        (tmp_path / "rgb.ply").write_bytes(header.encode() + body)
        np.testing.assert_array_equal(load_cloud(tmp_path / "rgb.ply"), [[1, 2, 3], [4, 5, 6]])

    def test_big_endian(self, tmp_path):
        header = ("ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty double x\n"
                  "property double y\nproperty double z\nend_header\n")
        (tmp_path / "be.ply").write_bytes(header.encode() + struct.pack(">ddd", 1.25, -2.5, 3.0))
        np.testing.assert_array_equal(load_cloud(tmp_path / "be.ply"), [[1.25, -2.5, 3.0]])

    def test_sniffs_unknown_suffix(self, tmp_path, rng):
        pts = rng.standard_normal((3, 3))
        save_cloud(tmp_path / "c.ply", pts)
        (tmp_path / "c.bin").write_bytes((tmp_path / "c.ply").read_bytes())
        np.testing.assert_array_equal(load_cloud(tmp_path / "c.bin"), pts)

    @pytest.mark.parametrize("content, message", [
        (b"not a ply\n", "unknown cloud format"),
        (b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
         b"property float z\nend_header\n1 2 3\n", "expected 2 vertices"),
        (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
         "lacks x/y/z"),
        (b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty double x\nproperty double y\n"
         b"property double z\nend_header\n" + bytes(24), "truncated"),
        (b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n"
         b"property float z\nend_header\n", "empty"),
        (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
         b"property float z\nend_header\n1 nan 3\n", "row 0"),
    ])
    def test_errors(self, tmp_path, content, message):
        suffix = ".dat" if content.startswith(b"not") else ".ply"
        path = tmp_path / f"bad{suffix}"
        path.write_bytes(content)
        with pytest.raises(CloudFormatError, match=message):
            load_cloud(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cloud(tmp_path / "nope.ply")


class TestTrace:
    def records(self, n_particles, n_iterations):
        return [{"iteration": k, "particle": j, "preshape": 0, "phase": "stein", "loss": 0.1 * k,
                 "in_collision": False, "collision_count": 0, "theta": [0, 0, 0, 1, 0, 0, 0]}
                for k in range(n_iterations) for j in range(n_particles)]

    def test_record_count(self, tmp_path):
        path = tmp_path / "t.ndjson"
        assert export_trace(self.records(2, 3), path) == 6
        lines = path.read_text().splitlines()
        assert len(lines) == 7
        assert json.loads(lines[0])["schema"] == TRACE_SCHEMA
        assert len(read_trace(path)) == 6

    def test_empty_has_header(self, tmp_path):
        path = tmp_path / "t.ndjson"
        export_trace([], path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["schema"] == TRACE_SCHEMA

    def test_io_error_surfaces(self, tmp_path):
        with pytest.raises(OSError):
            export_trace([], tmp_path / "missing_dir" / "t.ndjson")


def test_pose_file_round_trip(tmp_path, rng):
    poses = rng.standard_normal((5, 7))
    save_poses(tmp_path / "p.txt", poses)
    np.testing.assert_array_equal(load_poses(tmp_path / "p.txt"), poses)
