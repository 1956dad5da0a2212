# lidar-probe-init/src/lidar_probe_init/formats.py
"""
On-disk formats of the pipeline.

Clouds are PLY (ASCII or binary little-endian, 64-bit float coordinates,
optional normals and an integer ``label`` property) or CSV with header
``x,y,z[,nx,ny,nz]``. Scan logs are CSV ``timestamp,theta,range,valid``
with one row per sample; a new revolution starts whenever theta fails to
increase. Pose logs are CSV ``timestamp,tx,ty,tz,qx,qy,qz,qw`` with
scalar-last unit quaternions.

Floats are written with 17 significant digits so that a write/read cycle
is exact.
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lidar_probe_init.exceptions import RejectedInputError
from lidar_probe_init.geometry import (
    BASE,
    TCP,
    FrameId,
    PointCloud,
    PolarScan,
    RigidTransform,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SCAN_HEADER = "timestamp,theta,range,valid"
POSE_HEADER = "timestamp,tx,ty,tz,qx,qy,qz,qw"

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        logger.error(f"Input file '{path}' not found")
        raise RejectedInputError(f"Input file not found: {path}")


def to_jsonable(value: Any) -> Any:
    """Recursively convert numpy containers and scalars to plain Python."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps_json(payload: Any) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n"


def write_json(path: str, payload: Any) -> str:
    text = dumps_json(payload)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(text)
    logger.debug(f"Wrote {path}")
    return text


def read_json(path: str) -> Dict[str, Any]:
    _require_file(path)
    with open(path, "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"Error parsing JSON file {path}: {e}")
            raise RejectedInputError(f"Malformed JSON in {path}: {e}") from e


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_rows(path: str, header: str, columns: Sequence[np.ndarray], fmt) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data = np.column_stack(columns) if columns[0].size else np.zeros((0, len(fmt)))
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        np.savetxt(f, data, fmt=fmt, delimiter=",")


def _read_rows(path: str, expected_header: Optional[str] = None) -> Tuple[str, np.ndarray]:
    _require_file(path)
    with open(path, "r") as f:
        header = f.readline().strip()
        if expected_header is not None and header != expected_header:
            logger.error(f"Unexpected header in {path}: {header!r}")
            raise RejectedInputError(
                f"{path}: expected header '{expected_header}', found '{header}'"
            )
        try:
            rows = np.loadtxt(f, delimiter=",", ndmin=2, dtype=float)
        except ValueError as e:
            raise RejectedInputError(f"{path}: malformed row ({e})") from e
    columns = len(header.split(","))
    if rows.size == 0:
        rows = np.zeros((0, columns))
    if rows.shape[1] != columns:
        raise RejectedInputError(f"{path}: rows do not match the header")
    return header, rows


# --- point clouds -----------------------------------------------------------


def write_ply(path: str, cloud: PointCloud, binary: bool = True) -> None:
    """
    Write a cloud as PLY with double coordinates.

    Args:
        path: Output file.
        cloud: Cloud to write; normals and labels are written when present.
        binary: binary_little_endian when True, ASCII otherwise.
    """
    names = ["x", "y", "z"]
    columns = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        columns.append(cloud.normals)
    dtype = [(name, "<f8") for name in names]
    if cloud.labels is not None:
        dtype.append(("label", "<i4"))
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"comment frame {cloud.frame.name}",
        f"element vertex {len(cloud)}",
    ]
    header += [f"property double {name}" for name in names]
    if cloud.labels is not None:
        header.append("property int label")
    header.append("end_header")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            record = np.zeros(len(cloud), dtype=dtype)
            floats = np.hstack(columns) if len(cloud) else np.zeros((0, len(names)))
            for i, name in enumerate(names):
                record[name] = floats[:, i]
            if cloud.labels is not None:
                record["label"] = cloud.labels
            f.write(record.tobytes())
        else:
            fmt = [FLOAT_FORMAT] * len(names)
            data = np.hstack(columns) if len(cloud) else np.zeros((0, len(names)))
            if cloud.labels is not None:
                fmt.append("%d")
                data = np.column_stack([data, cloud.labels])
            lines = "".join(
                " ".join(f % v for f, v in zip(fmt, row)) + "\n" for row in data
            )
            f.write(lines.encode("ascii"))
    logger.debug(f"Wrote {len(cloud)} points to {path}")


def _parse_ply_header(f) -> Tuple[str, int, List[Tuple[str, str]], Optional[FrameId]]:
    if f.readline().strip() != b"ply":
        raise RejectedInputError("Not a PLY file")
    fmt = ""
    vertex_count = 0
    properties: List[Tuple[str, str]] = []
    frame: Optional[FrameId] = None
    element = None
    while True:
        line = f.readline()
        if not line:
            raise RejectedInputError("PLY header has no end_header")
        tokens = line.decode("ascii").split()
        if not tokens:
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "comment" and len(tokens) >= 3 and tokens[1] == "frame":
            frame = FrameId(tokens[2])
        elif tokens[0] == "element":
            element = tokens[1]
            if element == "vertex":
                vertex_count = int(tokens[2])
        elif tokens[0] == "property" and element == "vertex":
            if tokens[1] == "list":
                raise RejectedInputError("List properties on vertices are unsupported")
            if tokens[1] not in _PLY_TYPES:
                raise RejectedInputError(f"Unknown PLY property type {tokens[1]}")
            properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise RejectedInputError(f"Unsupported PLY format '{fmt}'")
    return fmt, vertex_count, properties, frame


def read_ply(path: str, frame: Optional[FrameId] = None) -> PointCloud:
    """
    Read the vertex element of a PLY file.

    Args:
        path: Input file.
        frame: Frame to assign; defaults to the ``comment frame`` line or base.
    """
    _require_file(path)
    with open(path, "rb") as f:
        fmt, count, properties, stored_frame = _parse_ply_header(f)
        names = [name for name, _ in properties]
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + code) for name, code in properties])
            record = np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype)
            if record.shape[0] != count:
                raise RejectedInputError(f"{path}: truncated vertex data")
            columns = {name: record[name].astype(float) for name in names}
        else:
            rows = [f.readline().split() for _ in range(count)]
            data = np.array(rows, dtype=float).reshape(count, len(names))
            columns = {name: data[:, i] for i, name in enumerate(names)}
    for axis in ("x", "y", "z"):
        if axis not in columns:
            raise RejectedInputError(f"{path}: missing vertex property {axis}")
    points = np.column_stack([columns["x"], columns["y"], columns["z"]])
    normals = None
    if all(n in columns for n in ("nx", "ny", "nz")):
        normals = np.column_stack([columns["nx"], columns["ny"], columns["nz"]])
    labels = columns["label"].astype(np.int64) if "label" in columns else None
    logger.debug(f"Read {count} points from {path}")
    return PointCloud(points, frame or stored_frame or BASE, normals, labels)


def write_cloud_csv(path: str, cloud: PointCloud) -> None:
    if cloud.normals is not None:
        _write_rows(
            path,
            "x,y,z,nx,ny,nz",
            [cloud.points, cloud.normals],
            [FLOAT_FORMAT] * 6,
        )
    else:
        _write_rows(path, "x,y,z", [cloud.points], [FLOAT_FORMAT] * 3)


def read_cloud_csv(path: str, frame: FrameId = BASE) -> PointCloud:
    header, rows = _read_rows(path)
    if header == "x,y,z":
        return PointCloud(rows, frame)
    if header == "x,y,z,nx,ny,nz":
        return PointCloud(rows[:, :3], frame, rows[:, 3:])
    raise RejectedInputError(f"{path}: unexpected cloud header '{header}'")


def read_cloud(path: str, frame: Optional[FrameId] = None) -> PointCloud:
    """Read a ``.ply`` or ``.csv`` cloud."""
    if path.lower().endswith(".csv"):
        return read_cloud_csv(path, frame or BASE)
    return read_ply(path, frame)


def write_cloud(path: str, cloud: PointCloud, binary: bool = True) -> None:
    if path.lower().endswith(".csv"):
        write_cloud_csv(path, cloud)
    else:
        write_ply(path, cloud, binary=binary)


# --- scan and pose logs -----------------------------------------------------


def write_scan_log(path: str, scans: Sequence[PolarScan]) -> None:
    """Write scans back to back, one row per sample."""
    if scans:
        columns = [
            np.concatenate([s.timestamps for s in scans]),
            np.concatenate([s.angles for s in scans]),
            np.concatenate([s.ranges for s in scans]),
            np.concatenate([s.valid for s in scans]).astype(int),
        ]
    else:
        columns = [np.zeros(0)] * 4
    _write_rows(
        path, SCAN_HEADER, columns, [FLOAT_FORMAT, FLOAT_FORMAT, FLOAT_FORMAT, "%d"]
    )


def read_scan_log(path: str) -> List[PolarScan]:
    """
    Read a scan log and split it into revolutions.

    A revolution ends where the next angle is not larger than the current
    one. Each scan's timestamp is that of its first sample.
    """
    _, rows = _read_rows(path, SCAN_HEADER)
    if rows.shape[0] == 0:
        return []
    theta = rows[:, 1]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(theta) <= 0) + 1])
    stops = np.concatenate([starts[1:], [rows.shape[0]]])
    scans = []
    for start, stop in zip(starts, stops):
        block = rows[start:stop]
        scans.append(
            PolarScan(
                block[:, 1],
                block[:, 2],
                block[:, 3] != 0,
                block[:, 0],
                scan_timestamp=float(block[0, 0]),
            )
        )
    logger.debug(f"Read {len(scans)} scans from {path}")
    return scans


def write_pose_log(path: str, poses: Sequence[Tuple[float, RigidTransform]]) -> None:
    if poses:
        timestamps = np.array([t for t, _ in poses], dtype=float)
        translations = np.array([p.translation for _, p in poses])
        quaternions = np.array([p.as_quaternion() for _, p in poses])
    else:
        timestamps, translations, quaternions = (
            np.zeros(0),
            np.zeros((0, 3)),
            np.zeros((0, 4)),
        )
    _write_rows(
        path, POSE_HEADER, [timestamps, translations, quaternions], [FLOAT_FORMAT] * 8
    )


def read_pose_log(
    path: str, from_frame: FrameId = TCP, to_frame: FrameId = BASE
) -> List[Tuple[float, RigidTransform]]:
    """
    Read a pose log.

    Raises:
        RejectedInputError: If a quaternion is far from unit length.
    """
    _, rows = _read_rows(path, POSE_HEADER)
    poses = []
    for row in rows:
        quaternion = row[4:8]
        norm = np.linalg.norm(quaternion)
        if abs(norm - 1.0) > 1e-6:
            logger.error(f"Non-unit quaternion in {path}: {quaternion}")
            raise RejectedInputError(f"{path}: quaternion norm {norm} is not 1")
        poses.append(
            (
                float(row[0]),
                RigidTransform.from_quaternion(quaternion, row[1:4], from_frame, to_frame),
            )
        )
    return poses
