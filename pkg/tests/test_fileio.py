"""Round-trip and error tests for the on-disk volume and slice formats."""

import numpy as np
import pytest

from sliceloc.errors import DataError
from sliceloc.fileio import (
    load_pose,
    load_slice,
    load_volume,
    read_json,
    read_jsonl,
    save_pose,
    save_slice,
    save_volume,
    sidecar_path,
    write_jsonl,
)
from sliceloc.geom import Pose, SliceGeometry
from sliceloc.volume import Slice, Volume


class TestVolumeFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        v = Volume(rng.uniform(-10, 50, (7, 9, 11)), 1.5)
        path = tmp_path / "vol.vvol"
        save_volume(v, path)
        back = load_volume(path)
        assert back.dims == v.dims
        assert back.spacing == v.spacing
        # float32 storage quantizes, relative error bounded by the mantissa
        assert np.allclose(back.data, v.data, atol=1e-4)

    def test_x_fastest_byte_order(self, tmp_path):
        """The first stored samples walk along the x index."""
        data = np.zeros((3, 2, 2))
        data[:, 0, 0] = [1.0, 2.0, 3.0]
        path = tmp_path / "v.vvol"
        save_volume(Volume(data, 1.0), path)
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        assert np.allclose(raw[:3], [1.0, 2.0, 3.0])

    def test_missing_raw_file(self, tmp_path):
        v = Volume(np.zeros((3, 3, 3)), 1.0)
        path = tmp_path / "v.vvol"
        save_volume(v, path)
        path.unlink()
        with pytest.raises(DataError):
            load_volume(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "v.vvol"
        path.write_bytes(b"\x00" * 108)
        with pytest.raises(DataError):
            load_volume(path)

    def test_size_mismatch(self, tmp_path):
        v = Volume(np.zeros((3, 3, 3)), 1.0)
        path = tmp_path / "v.vvol"
        save_volume(v, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataError):
            load_volume(path)

    def test_bad_order_tag(self, tmp_path):
        v = Volume(np.zeros((3, 3, 3)), 1.0)
        path = tmp_path / "v.vvol"
        save_volume(v, path)
        meta = read_json(sidecar_path(path))
        meta["order"] = "zyx"
        sidecar_path(path).write_text(__import__("json").dumps(meta))
        with pytest.raises(DataError):
            load_volume(path)

    def test_nonfinite_rejected(self, tmp_path):
        path = tmp_path / "v.vvol"
        save_volume(Volume(np.zeros((3, 3, 3)), 1.0), path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError):
            load_volume(path)


class TestSliceFormat:
    def test_round_trip_with_pose(self, tmp_path):
        rng = np.random.default_rng(7)
        g = SliceGeometry(12, 8, 1.0)
        pose = Pose.from_rotvec([0.1, 0.2, -0.3], [4.0, -2.0, 1.0])
        s = Slice(rng.uniform(-3, 9, (8, 12)), g, pose=pose)
        path = tmp_path / "s.pgm"
        save_slice(s, path)
        back = load_slice(path)
        assert back.geometry == g
        span = s.data.max() - s.data.min()
        assert np.abs(back.data - s.data).max() <= span / 65535 + 1e-9
        assert back.pose is not None
        assert np.allclose(back.pose.rotation, pose.rotation, atol=1e-9)
        assert np.allclose(back.pose.translation, pose.translation)

    def test_round_trip_without_pose(self, tmp_path):
        s = Slice(np.zeros((4, 4)), SliceGeometry(4, 4, 2.0))
        path = tmp_path / "s.pgm"
        save_slice(s, path)
        assert load_slice(path).pose is None

    def test_constant_image(self, tmp_path):
        s = Slice(np.full((5, 5), 3.7), SliceGeometry(5, 5, 1.0))
        path = tmp_path / "c.pgm"
        save_slice(s, path)
        assert np.allclose(load_slice(path).data, 3.7)

    def test_header_is_binary_pgm(self, tmp_path):
        s = Slice(np.zeros((2, 3)), SliceGeometry(3, 2, 1.0))
        path = tmp_path / "h.pgm"
        save_slice(s, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 2\n65535\n")
        assert len(raw) == len(b"P5\n3 2\n65535\n") + 2 * 3 * 2

    def test_big_endian_samples(self, tmp_path):
        data = np.zeros((2, 2))
        data[0, 1] = 65535.0
        s = Slice(data, SliceGeometry(2, 2, 1.0))
        path = tmp_path / "e.pgm"
        save_slice(s, path)
        body = path.read_bytes().split(b"65535\n", 1)[1]
        assert body == b"\x00\x00\xff\xff\x00\x00\x00\x00"

    def test_8bit_pgm_accepted(self, tmp_path):
        path = tmp_path / "old.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        meta = {"width": 2, "height": 2, "spacing_mm": 1.0,
                "rescale": {"offset": 0.0, "scale": 1.0}, "pose": None}
        sidecar_path(path).write_text(__import__("json").dumps(meta))
        s = load_slice(path)
        assert np.allclose(s.data, [[0, 128], [255, 64]])

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "cmt.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 2\n255\n" + bytes([5, 6, 7, 8]))
        meta = {"width": 2, "height": 2, "spacing_mm": 1.0,
                "rescale": {"offset": 0.0, "scale": 2.0}, "pose": None}
        sidecar_path(path).write_text(__import__("json").dumps(meta))
        assert np.allclose(load_slice(path).data, [[10.0, 12.0], [14.0, 16.0]])

    def test_not_pgm(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        sidecar_path(path).write_text("{}")
        with pytest.raises(DataError):
            load_slice(path)

    def test_truncated_pixels(self, tmp_path):
        s = Slice(np.ones((4, 4)), SliceGeometry(4, 4, 1.0))
        path = tmp_path / "t.pgm"
        save_slice(s, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataError):
            load_slice(path)

    def test_shape_mismatch_with_sidecar(self, tmp_path):
        s = Slice(np.ones((4, 4)), SliceGeometry(4, 4, 1.0))
        path = tmp_path / "m.pgm"
        save_slice(s, path)
        meta = read_json(sidecar_path(path))
        meta["width"] = 5
        sidecar_path(path).write_text(__import__("json").dumps(meta))
        with pytest.raises(DataError):
            load_slice(path)


class TestPoseFile:
    def test_round_trip(self, tmp_path):
        p = Pose.from_rotvec([0.3, -0.2, 0.5], [1, 2, 3])
        path = tmp_path / "pose.json"
        save_pose(p, path)
        q = load_pose(path)
        assert np.allclose(q.rotation, p.rotation, atol=1e-9)
        assert np.allclose(q.translation, p.translation)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "pose.json"
        path.write_text("{not json")
        with pytest.raises(DataError):
            load_pose(path)


class TestJsonl:
    def test_round_trip(self, tmp_path):
        recs = [{"b": 1, "a": [1, 2]}, {"x": None}]
        path = tmp_path / "recs.jsonl"
        write_jsonl(recs, path)
        assert read_jsonl(path) == recs

    def test_deterministic_bytes(self, tmp_path):
        recs = [{"b": 1.5, "a": "x"}]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(recs, p1)
        write_jsonl(recs, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"ok": 1}\nnope\n')
        with pytest.raises(DataError):
            read_jsonl(path)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_jsonl(tmp_path / "absent.jsonl")
