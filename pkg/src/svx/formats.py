"""Binary frame/weight containers and the detection/track JSON schemas.

All multi-byte fields are little-endian; payloads are float32. Both binary
formats round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BadMagic, FormatError, TruncatedFile, VersionUnsupported
from .head import Detection
from .voxelize import GridConfig, PointCloud

FRAME_MAGIC = b"SVXP"
WEIGHTS_MAGIC = b"SVXW"
WEIGHTS_VERSION = 1

_DTYPE_F32 = 0


def write_frame(path, pc: PointCloud) -> None:
    """SVXP layout: magic, point count u32, N x (x,y,z,intensity) f32,
    timestamp f64, frame id u32."""
    pts = np.ascontiguousarray(pc.points[:, :4], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())
        fh.write(struct.pack("<dI", float(pc.timestamp), int(pc.frame_id)))


def read_frame(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != FRAME_MAGIC:
        raise BadMagic(f"{path}: not a frame file")
    (count,) = struct.unpack_from("<I", blob, 4)
    expected = 8 + 16 * count + 12
    if len(blob) != expected:
        raise TruncatedFile(f"{path}: {len(blob)} bytes, header implies {expected}")
    pts = np.frombuffer(blob, dtype="<f4", count=4 * count, offset=8)
    ts, fid = struct.unpack_from("<dI", blob, 8 + 16 * count)
    return PointCloud(pts.reshape(count, 4).astype(np.float32), float(ts), int(fid))


def write_weights(path, tensors: dict[str, np.ndarray]) -> None:
    """SVXW layout: magic, version u16, tensor count u32, directory entries
    (name, dtype, shape, payload offset), then the concatenated f32 payload.

    Tensors are written name-sorted so identical inputs produce identical
    bytes.
    """
    names = sorted(tensors)
    payload = bytearray()
    directory = bytearray()
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        enc = name.encode("utf-8")
        directory += struct.pack("<H", len(enc)) + enc
        directory += struct.pack("<BB", _DTYPE_F32, arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", len(payload))
        payload += raw
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<HI", WEIGHTS_VERSION, len(names)))
        fh.write(bytes(directory))
        fh.write(bytes(payload))


def read_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != WEIGHTS_MAGIC:
        raise BadMagic(f"{path}: not a weight file")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != WEIGHTS_VERSION:
        raise VersionUnsupported(f"{path}: version {version}, expected {WEIGHTS_VERSION}")
    pos = 10
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if dtype != _DTYPE_F32:
                raise FormatError(f"{path}: unsupported dtype code {dtype} for {name}")
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            entries.append((name, shape, offset))
    except struct.error as exc:
        raise TruncatedFile(f"{path}: directory ends early ({exc})") from exc

    payload_base = pos
    payload_size = len(blob) - payload_base
    tensors = {}
    prev_end = -1
    for name, shape, offset in sorted(entries, key=lambda e: e[2]):
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if offset < 0 or offset + nbytes > payload_size:
            raise TruncatedFile(f"{path}: tensor {name} exceeds the payload")
        if offset < prev_end:
            raise FormatError(f"{path}: tensor {name} overlaps the previous payload")
        prev_end = offset + nbytes
        arr = np.frombuffer(blob, dtype="<f4",
                            count=int(np.prod(shape, dtype=np.int64)),
                            offset=payload_base + offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return tensors


def detection_record(det: Detection) -> dict:
    return {
        "frame_id": det.frame_id,
        "class": det.class_id,
        "score": det.score,
        "center": [det.center[0], det.center[1], det.center[2]],
        "size": [det.size[0], det.size[1], det.size[2]],
        "yaw": det.yaw,
        "velocity": None if det.velocity is None else [det.velocity[0], det.velocity[1]],
        "query_voxel": [det.query_voxel[0], det.query_voxel[1]],
    }


def detection_from_record(rec: dict, grid: GridConfig, stride: int = 8) -> Detection:
    from .head import query_voxel_center

    voxel = (int(rec["query_voxel"][0]), int(rec["query_voxel"][1]))
    vel = rec.get("velocity")
    return Detection(
        class_id=int(rec["class"]),
        score=float(rec["score"]),
        center=tuple(float(v) for v in rec["center"]),
        size=tuple(float(v) for v in rec["size"]),
        yaw=float(rec["yaw"]),
        velocity=None if vel is None else (float(vel[0]), float(vel[1])),
        query_voxel=voxel,
        query_pos=query_voxel_center(voxel, grid, stride),
        frame_id=int(rec["frame_id"]),
    )


def write_detections(path, frame_id: int, timestamp: float, dets) -> None:
    doc = {
        "frame_id": int(frame_id),
        "timestamp": float(timestamp),
        "detections": [detection_record(d) for d in dets],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_detections(path, grid: GridConfig) -> tuple[int, float, list[Detection]]:
    with open(path) as fh:
        doc = json.load(fh)
    dets = [detection_from_record(r, grid) for r in doc["detections"]]
    return int(doc["frame_id"]), float(doc["timestamp"]), dets


def write_tracks(path, frames) -> None:
    """frames: list of (frame_id, timestamp, list[TrackOutput])."""
    doc = {
        "frames": [
            {
                "frame_id": int(fid),
                "timestamp": float(ts),
                "tracks": [
                    {
                        "id": t.track_id,
                        "class": t.class_id,
                        "center": [t.center[0], t.center[1]],
                        "velocity": [t.velocity[0], t.velocity[1]],
                    }
                    for t in tracks
                ],
            }
            for fid, ts, tracks in frames
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
