"""
Storage Service for ArtiField
Handles every on-disk artifact: checkpoints, meshes (OBJ), point clouds (PLY),
images (PNG + raw .npy), cameras, poses, joint detections and dataset
manifests.

Checkpoint format (all integers little-endian):

    magic      8 bytes   b"ARTIFLD1"
    u32        header length H
    H bytes    UTF-8 JSON header (sorted keys, compact separators)
    u32        tensor count T
    T times:   u32 name length, name bytes (UTF-8),
               u32 ndim, ndim × u64 dims,
               prod(dims) × float64 (little-endian, C order)

Tensors are written in sorted-name order, so identical inputs give
byte-identical files.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import aiofiles
import numpy as np
from PIL import Image

from ..config import get_settings
from ..core.errors import ParseError
from ..core.kinematics import Skeleton
from ..core.meshing import TriMesh
from ..core.rendering import Camera

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"ARTIFLD1"
CHECKPOINT_SUFFIX = ".afck"
PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


# -- generic helpers -------------------------------------------------------------

def write_json(path: PathLike, data: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(str(path), e.msg, offset=e.pos, line=e.lineno) from e


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], header: Optional[Dict[str, Any]] = None) -> None:
    header_bytes = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes,
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise ParseError(self.path, f"truncated while reading {what}: need {n} bytes, "
                                        f"{len(self.data) - self.offset} left", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, tensors)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise ParseError(str(path), "not an ArtiField checkpoint (bad magic)", offset=0)
    header_len = reader.u32("header length")
    header_start = reader.offset
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(str(path), f"malformed header: {e}", offset=header_start) from e
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        ndim = reader.u32(f"ndim of {name}")
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim, f"shape of {name}"))
        count = int(np.prod(shape)) if ndim else 1
        raw = reader.take(8 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if reader.offset != len(reader.data):
        raise ParseError(str(path), "trailing bytes after the last tensor", offset=reader.offset)
    return header, tensors


# -- meshes --------------------------------------------------------------------

def write_obj(path: PathLike, mesh: TriMesh) -> None:
    """Wavefront OBJ; vertex colors are appended to ``v`` lines when present."""
    lines = []
    for i, v in enumerate(mesh.vertices):
        if mesh.colors is not None:
            c = mesh.colors[i]
            lines.append(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
        else:
            lines.append(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path: PathLike) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mesh not found: {path}")
    vertices: List[List[float]] = []
    colors: List[List[float]] = []
    faces: List[List[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    values = [float(p) for p in parts[1:]]
                    if len(values) not in (3, 6):
                        raise ValueError(f"vertex needs 3 or 6 numbers, got {len(values)}")
                    vertices.append(values[:3])
                    if len(values) == 6:
                        colors.append(values[3:])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as e:
                raise ParseError(str(path), str(e), line=lineno) from e
    if colors and len(colors) != len(vertices):
        raise ParseError(str(path), "vertex colors given for only some vertices")
    try:
        return TriMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                       np.array(colors) if colors else None)
    except ValueError as e:
        raise ParseError(str(path), str(e)) from e


# -- point clouds ----------------------------------------------------------------

def write_ply(path: PathLike, columns: Dict[str, np.ndarray], binary: bool = True) -> None:
    """Vertex-only PLY with one double property per column, in the given order."""
    names = list(columns)
    arrays = [np.asarray(columns[n], dtype=np.float64).reshape(-1) for n in names]
    count = len(arrays[0]) if arrays else 0
    if any(len(a) != count for a in arrays):
        raise ValueError("All PLY columns must have the same length")
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {count}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    table = np.stack(arrays, axis=-1) if arrays else np.zeros((0, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        else:
            for row in table:
                f.write((" ".join(f"{v:.17g}" for v in row) + "\n").encode("ascii"))


def read_ply(path: PathLike) -> Dict[str, np.ndarray]:
    """Scalar vertex properties of an ascii or little-endian binary PLY."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Point cloud not found: {path}")
    data = path.read_bytes()
    marker = data.find(b"end_header")
    if not data.startswith(b"ply") or marker < 0:
        raise ParseError(str(path), "missing PLY magic or end_header", offset=0)
    body_start = data.index(b"\n", marker) + 1 if b"\n" in data[marker:] else len(data)
    fmt = None
    count = None
    props: List[Tuple[str, str]] = []
    in_vertex = False
    for lineno, line in enumerate(data[:marker].decode("ascii", errors="replace").splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if count is not None and in_vertex:
                in_vertex = False
                break
            in_vertex = parts[1] == "vertex"
            if not in_vertex:
                raise ParseError(str(path), f"element {parts[1]} precedes the vertex element", line=lineno)
            count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ParseError(str(path), "list properties on vertices are not supported", line=lineno)
            if parts[1] not in PLY_TYPES:
                raise ParseError(str(path), f"unknown property type {parts[1]}", line=lineno)
            props.append((parts[2], PLY_TYPES[parts[1]]))
    if count is None or not props:
        raise ParseError(str(path), "no vertex element in header", offset=0)

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        need = count * dtype.itemsize
        available = len(data) - body_start
        if available < need:
            raise ParseError(str(path), f"truncated vertex data: expected {need} bytes, found {available}",
                             offset=len(data))
        table = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
        return {name: table[name].astype(np.float64) for name, _ in props}
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").splitlines()
        header_lines = data[:body_start].count(b"\n")
        if len(rows) < count:
            raise ParseError(str(path), f"expected {count} vertex rows, found {len(rows)}",
                             offset=len(data), line=header_lines + len(rows))
        values = np.zeros((count, len(props)))
        for i in range(count):
            parts = rows[i].split()
            try:
                values[i] = [float(p) for p in parts[:len(props)]]
                if len(parts) < len(props):
                    raise ValueError(f"row has {len(parts)} values, expected {len(props)}")
            except ValueError as e:
                raise ParseError(str(path), str(e), line=header_lines + i + 1) from e
        return {name: values[:, k] for k, (name, _) in enumerate(props)}
    raise ParseError(str(path), f"unsupported PLY format {fmt!r}", offset=0)


def write_cloud(path: PathLike, points: np.ndarray, normals: Optional[np.ndarray] = None,
                weights: Optional[np.ndarray] = None, binary: bool = True) -> None:
    columns: Dict[str, np.ndarray] = {}
    for k, axis in enumerate("xyz"):
        columns[axis] = points[:, k]
    if normals is not None:
        for k, axis in enumerate("xyz"):
            columns[f"n{axis}"] = normals[:, k]
    if weights is not None:
        for j in range(weights.shape[1]):
            columns[f"w_{j}"] = weights[:, j]
    write_ply(path, columns, binary)


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.points)


def read_cloud(path: PathLike) -> PointCloud:
    columns = read_ply(path)
    if not all(axis in columns for axis in "xyz"):
        raise ParseError(str(path), "point cloud needs x, y and z properties")
    points = np.stack([columns[a] for a in "xyz"], axis=-1)
    normals = None
    if all(f"n{a}" in columns for a in "xyz"):
        normals = np.stack([columns[f"n{a}"] for a in "xyz"], axis=-1)
    weight_names = sorted((n for n in columns if n.startswith("w_")), key=lambda n: int(n[2:]))
    weights = np.stack([columns[n] for n in weight_names], axis=-1) if weight_names else None
    return PointCloud(points, normals, weights)


# -- images ----------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: PathLike, image: np.ndarray) -> None:
    """RGB (H, W, 3) or mask (H, W) in [0, 1] (bool masks allowed) as 8-bit PNG."""
    image = np.asarray(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if image.ndim == 2:
        Image.fromarray(to_uint8(image.astype(np.float64)), mode="L").save(path, format="PNG")
    else:
        Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    with Image.open(path) as img:
        mode = "L" if img.mode in ("L", "1") else "RGB"
        return np.asarray(img.convert(mode), dtype=np.float64) / 255.0


def write_raw(path: PathLike, array: np.ndarray) -> None:
    """Float32 .npy dump for exact comparisons."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(array, dtype=np.float32), allow_pickle=False)


def read_raw(path: PathLike) -> np.ndarray:
    if not Path(path).exists():
        raise FileNotFoundError(f"Raw image not found: {path}")
    return np.load(path, allow_pickle=False)


# -- poses and detections --------------------------------------------------------

def write_pose(path: PathLike, pose: np.ndarray, subject: Optional[str] = None) -> None:
    write_json(path, {"subject": subject, "pose": np.asarray(pose, dtype=np.float64).tolist()})


def read_pose(path: PathLike) -> Tuple[np.ndarray, Optional[str]]:
    data = read_json(path)
    try:
        pose = np.asarray(data["pose"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(str(path), f"malformed pose file: {e}") from e
    if pose.ndim != 2 or pose.shape[1] != 3:
        raise ParseError(str(path), f"pose must be (n_joints, 3), got {pose.shape}")
    return pose, data.get("subject")


def write_joints(path: PathLike, joints: np.ndarray) -> None:
    """Detection file: one ``x y confidence`` row per joint."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for x, y, conf in np.asarray(joints, dtype=np.float64).reshape(-1, 3):
            f.write(f"{x:.6f} {y:.6f} {conf:.6f}\n")


def read_joints(path: PathLike, n_joints: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Joint detections not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                values = [float(v) for v in line.split()]
                if len(values) != 3:
                    raise ValueError(f"expected 3 values (x y confidence), got {len(values)}")
            except ValueError as e:
                raise ParseError(str(path), str(e), line=lineno) from e
            rows.append(values)
    joints = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if n_joints is not None and len(joints) != n_joints:
        raise ParseError(str(path), f"expected {n_joints} joints, found {len(joints)}")
    return joints


# -- datasets --------------------------------------------------------------------

@dataclass
class ViewRecord:
    camera: str
    image: str
    mask: str
    depth: Optional[str] = None
    joints: Optional[str] = None


@dataclass
class FrameRecord:
    subject: str
    pose: str
    scan: Optional[str] = None
    views: List[ViewRecord] = field(default_factory=list)

    @property
    def name(self) -> str:
        return Path(self.pose).stem


@dataclass
class Dataset:
    """A dataset on disk as described by its manifest; files are read on demand."""

    root: Path
    skeleton: Skeleton
    subjects: List[str]
    cameras: Dict[str, Camera]
    frames: List[FrameRecord]
    manifest: Dict[str, Any]

    def path(self, relative: str) -> Path:
        return self.root / relative

    def subject_skeleton(self, subject: str) -> Skeleton:
        """Per-subject bone lengths when the manifest has them, else the template skeleton."""
        entry = self.manifest.get("subjects", {}).get(subject)
        if isinstance(entry, dict) and "skeleton" in entry:
            return Skeleton.from_dict(entry["skeleton"])
        return self.skeleton

    def pose(self, frame: FrameRecord) -> np.ndarray:
        return read_pose(self.path(frame.pose))[0]

    def scan(self, frame: FrameRecord) -> PointCloud:
        if frame.scan is None:
            raise FileNotFoundError(f"Frame {frame.name} has no scan")
        return read_cloud(self.path(frame.scan))

    def image(self, view: ViewRecord) -> np.ndarray:
        return read_png(self.path(view.image))

    def mask(self, view: ViewRecord) -> np.ndarray:
        return read_png(self.path(view.mask)) > 0.5

    def joints(self, view: ViewRecord) -> Optional[np.ndarray]:
        if view.joints is None:
            return None
        return read_joints(self.path(view.joints), self.skeleton.n_joints)

    @property
    def scan_frames(self) -> List[FrameRecord]:
        return [f for f in self.frames if f.scan is not None]

    @property
    def view_count(self) -> int:
        return sum(len(f.views) for f in self.frames)


def load_dataset(root: PathLike) -> Dataset:
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    try:
        skeleton = Skeleton.from_dict(manifest["skeleton"])
        cameras = {name: Camera.load(root / rel) for name, rel in sorted(manifest.get("cameras", {}).items())}
        frames = [
            FrameRecord(f["subject"], f["pose"], f.get("scan"),
                        [ViewRecord(v["camera"], v["image"], v["mask"], v.get("depth"), v.get("joints"))
                         for v in f.get("views", [])])
            for f in manifest["frames"]
        ]
    except (KeyError, TypeError) as e:
        raise ParseError(str(root / "manifest.json"), f"malformed manifest: {e}") from e
    subjects = sorted({f.subject for f in frames})
    return Dataset(root, skeleton, subjects, cameras, frames, manifest)


class StorageService:
    """Service for the ArtiField data directory (runs, datasets, uploads)"""

    def __init__(self, data_dir: Optional[str] = None):
        self.data_dir = Path(data_dir or get_settings().data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Storage root: {self.data_dir}")

    def resolve(self, relative: str) -> Path:
        """Path under the data directory; absolute paths and '..' escapes are rejected."""
        candidate = (self.data_dir / relative).resolve()
        if self.data_dir.resolve() not in candidate.parents and candidate != self.data_dir.resolve():
            raise ValueError(f"Path escapes the data directory: {relative}")
        return candidate

    def list_entries(self, kind: str) -> List[Dict[str, Any]]:
        base = self.data_dir / kind
        if not base.exists():
            return []
        entries = []
        for entry in sorted(base.iterdir()):
            entries.append({"name": entry.name, "path": str(entry.relative_to(self.data_dir)),
                            "is_directory": entry.is_dir()})
        return entries

    async def save_upload(self, content: bytes, relative: str) -> Path:
        target = self.resolve(relative)
        target.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(target, "wb") as f:
            await f.write(content)
        logger.info(f"Stored upload at {target} ({len(content)} bytes)")
        return target

    async def read_text(self, relative: str) -> str:
        target = self.resolve(relative)
        if not target.exists():
            raise FileNotFoundError(f"File not found: {relative}")
        async with aiofiles.open(target, "r", encoding="utf-8") as f:
            return await f.read()

    def ensure_dir(self, relative: str) -> Path:
        target = self.resolve(relative)
        os.makedirs(target, exist_ok=True)
        return target
