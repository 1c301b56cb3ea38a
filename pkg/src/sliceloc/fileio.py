"""On-disk formats: raw float32 volumes, 16-bit PGM slices, JSON sidecars.

Volumes are stored as <name>.vvol (little-endian float32, x-fastest voxel
order) next to <name>.vvol.json describing dims and spacing.  Slices are
16-bit binary PGM (big-endian samples, as the format requires) next to a
sidecar recording the linear intensity rescale, the pixel geometry, and the
extraction pose when known.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .geom import Pose, SliceGeometry
from .volume import Slice, Volume

VVOL_ORDER = "xyz-fastest-x"
PGM_MAXVAL = 65535


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list:
    out = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON line: {exc}") from exc
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    return out


def save_volume(v: Volume, path) -> None:
    path = Path(path)
    raw = np.asarray(v.data, dtype="<f4").ravel(order="F")
    path.write_bytes(raw.tobytes())
    write_json(
        {"dims": list(v.dims), "spacing_mm": v.spacing, "order": VVOL_ORDER},
        sidecar_path(path),
    )


def load_volume(path) -> Volume:
    path = Path(path)
    meta = read_json(sidecar_path(path))
    try:
        dims = tuple(int(d) for d in meta["dims"])
        spacing = float(meta["spacing_mm"])
        order = meta["order"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad volume sidecar {sidecar_path(path)}: {exc}") from exc
    if len(dims) != 3:
        raise DataError(f"{sidecar_path(path)}: dims must have 3 entries")
    if order != VVOL_ORDER:
        raise DataError(f"{sidecar_path(path)}: unsupported voxel order {order!r}")
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(raw) != expected:
        raise DataError(
            f"{path}: size {len(raw)} bytes does not match dims {dims} "
            f"({expected} bytes expected)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F")
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: voxel block contains non-finite values")
    try:
        return Volume(data.astype(np.float64), spacing)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_slice(s: Slice, path) -> None:
    path = Path(path)
    lo = float(s.data.min())
    hi = float(s.data.max())
    scale = (hi - lo) / PGM_MAXVAL if hi > lo else 1.0
    raw = np.rint((s.data - lo) / scale)
    raw = np.clip(raw, 0, PGM_MAXVAL).astype(">u2")
    header = f"P5\n{s.geometry.width} {s.geometry.height}\n{PGM_MAXVAL}\n"
    path.write_bytes(header.encode("ascii") + raw.tobytes())
    meta = {
        "width": s.geometry.width,
        "height": s.geometry.height,
        "spacing_mm": s.geometry.spacing,
        "rescale": {"offset": lo, "scale": scale},
        "pose": s.pose.to_json_dict() if s.pose is not None else None,
    }
    write_json(meta, sidecar_path(path))


def _parse_pgm(raw: bytes, path) -> np.ndarray:
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed; one whitespace byte ends the header
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise DataError(f"{path}: truncated PGM header")
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
                j += 1
            tokens.append(raw[i:j])
            i = j
    i += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if not (0 < maxval <= PGM_MAXVAL):
        raise DataError(f"{path}: unsupported PGM maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    body = raw[i:]
    expected = count * np.dtype(dtype).itemsize
    if len(body) < expected:
        raise DataError(f"{path}: PGM pixel block truncated")
    pixels = np.frombuffer(body[:expected], dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64)


def load_slice(path) -> Slice:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    pixels = _parse_pgm(raw, path)
    meta = read_json(sidecar_path(path))
    try:
        g = SliceGeometry(int(meta["width"]), int(meta["height"]),
                          float(meta["spacing_mm"]))
        rescale = meta["rescale"]
        offset = float(rescale["offset"])
        scale = float(rescale["scale"])
        pose = None if meta.get("pose") is None else Pose.from_json_dict(meta["pose"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad slice sidecar {sidecar_path(path)}: {exc}") from exc
    if pixels.shape != (g.height, g.width):
        raise DataError(
            f"{path}: PGM is {pixels.shape[1]}x{pixels.shape[0]} but sidecar says "
            f"{g.width}x{g.height}"
        )
    return Slice(offset + scale * pixels, g, pose=pose)


def save_pose(p: Pose, path) -> None:
    write_json(p.to_json_dict(), path)


def load_pose(path) -> Pose:
    return Pose.from_json_dict(read_json(path))
