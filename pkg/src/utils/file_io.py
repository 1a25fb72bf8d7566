# file_io.py — readers/writers for every on-disk format the toolkit touches.
# Text formats write floats with repr (17 significant digits, exact round-trip).
# Binary formats are little-endian. Every failure names the file and position;
# see docs/FORMATS.md for the normative layouts.

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image

from src.engines.pose_graph import CONSECUTIVE, LOOP, MotionEdge, PoseGraph
from src.engines.reloc import LoopCandidate, Vocabulary
from src.models.camera import Intrinsics, depth_from_disparity
from src.models.rasters import DepthMap, FlowField
from src.models.se3 import DOF_NAMES, ORTHO_TOL, Motion6DoF, SE3Pose, UnitQuaternion, orthonormalize
from src.models.trajectory import Trajectory
from src.utils.errors import ConfigError, FormatError, InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

FLO_MAGIC = np.float32(202021.25)
FLO_INVALID = 1e10
FLO_INVALID_THRESHOLD = 1e9
DEPTH_SCALE = 256.0
QUAT_RENORM_WARN = 1e-6

VOCAB_MAGIC = b"BOVW"
VOCAB_VERSION = 1
_VOCAB_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("k", "<u4"), ("bits", "<u4")])


def _require_file(path: PathLike, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"No such {what}: {p}")
    return p


def _data_lines(path: Path):
    """(line number, fields) for every non-blank, non-comment line."""
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _floats(fields: Sequence[str], path: Path, lineno: int) -> np.ndarray:
    try:
        values = np.array([float(x) for x in fields])
    except ValueError:
        raise FormatError(f"non-numeric field in {' '.join(fields)!r}", str(path), lineno) from None
    if not np.all(np.isfinite(values)):
        raise FormatError("non-finite value", str(path), lineno)
    return values


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


# -- KITTI poses -----------------------------------------------------------------


def read_kitti_poses(path: PathLike) -> Trajectory:
    """12 floats per line (row-major 3x4); row i is the pose of frame i."""
    p = _require_file(path, "pose file")
    poses = []
    for lineno, fields in _data_lines(p):
        if len(fields) != 12:
            raise FormatError(f"expected 12 fields, got {len(fields)}", str(p), lineno)
        M = _floats(fields, p, lineno).reshape(3, 4)
        R = M[:, :3]
        err = float(np.max(np.abs(R.T @ R - np.eye(3))))
        if err > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            if err > 1e-3:
                raise FormatError(f"rotation is not orthonormal (error {err:.3g})", str(p), lineno)
            logger.warning("%s:%d: rotation re-orthonormalized (error %.3g)", p, lineno, err)
            R = orthonormalize(R)
        poses.append(SE3Pose(R, M[:, 3]))
    return Trajectory.from_poses(poses)


def write_kitti_poses(path: PathLike, traj: Trajectory) -> None:
    lines = [_fmt(np.column_stack([pose.rotation, pose.translation]).ravel()) for pose in traj]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# -- TUM trajectories --------------------------------------------------------------


def read_tum_trajectory(path: PathLike) -> Trajectory:
    """``t tx ty tz qx qy qz qw`` per line, timestamps strictly increasing."""
    p = _require_file(path, "trajectory file")
    stamps, poses = [], []
    for lineno, fields in _data_lines(p):
        if len(fields) != 8:
            raise FormatError(f"expected 8 fields, got {len(fields)}", str(p), lineno)
        v = _floats(fields, p, lineno)
        if stamps and v[0] <= stamps[-1]:
            raise FormatError(f"timestamp {v[0]!r} is not after {stamps[-1]!r}", str(p), lineno)
        norm = float(np.linalg.norm(v[4:8]))
        if norm == 0.0:
            raise FormatError("zero quaternion", str(p), lineno)
        if abs(norm - 1.0) > QUAT_RENORM_WARN:
            logger.warning("%s:%d: quaternion norm %.9g renormalized", p, lineno, norm)
        q = UnitQuaternion.normalized(v[7], v[4], v[5], v[6])
        stamps.append(float(v[0]))
        poses.append(SE3Pose(q.to_rotation(), v[1:4]))
    return Trajectory(tuple(range(len(poses))), tuple(poses), tuple(stamps))


def write_tum_trajectory(path: PathLike, traj: Trajectory) -> None:
    """Frame ids stand in for timestamps when the trajectory has none."""
    stamps = traj.timestamps if traj.timestamps is not None else [float(i) for i in traj.frame_ids]
    lines = []
    for t, pose in zip(stamps, traj):
        q = UnitQuaternion.from_rotation(pose.rotation)
        lines.append(_fmt([t, *pose.translation, *q.as_xyzw()]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_trajectory(path: PathLike) -> Trajectory:
    """KITTI or TUM, told apart by the field count of the first data line."""
    p = _require_file(path, "trajectory file")
    for lineno, fields in _data_lines(p):
        if len(fields) == 12:
            return read_kitti_poses(p)
        if len(fields) == 8:
            return read_tum_trajectory(p)
        raise FormatError(f"expected 12 (KITTI) or 8 (TUM) fields, got {len(fields)}", str(p), lineno)
    return Trajectory((), ())


def write_trajectory_points(path: PathLike, traj: Trajectory) -> None:
    """``x y z`` per line, for external plotting."""
    Path(path).write_text("".join(_fmt(p) + "\n" for p in traj.positions()), encoding="utf-8")


# -- flow -------------------------------------------------------------------------


def write_flo(path: PathLike, flow: FlowField) -> None:
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[..., 0] = np.where(flow.valid, flow.u, FLO_INVALID)
    data[..., 1] = np.where(flow.valid, flow.v, FLO_INVALID)
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array([flow.width, flow.height], dtype="<i4").tobytes()
    Path(path).write_bytes(header + data.tobytes())


def read_flo(path: PathLike) -> FlowField:
    p = _require_file(path, "flow file")
    buf = p.read_bytes()
    if len(buf) < 12:
        raise FormatError(f"truncated header ({len(buf)} bytes)", str(p))
    magic = np.frombuffer(buf, dtype="<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FormatError(f"bad magic {float(magic)!r}, expected {float(FLO_MAGIC)!r}", str(p))
    width, height = (int(x) for x in np.frombuffer(buf, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}", str(p))
    expected = 12 + 8 * width * height
    if len(buf) != expected:
        raise FormatError(f"payload is {len(buf) - 12} bytes, expected {expected - 12} for {width}x{height}", str(p))
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(height, width, 2).astype(float)
    u, v = data[..., 0], data[..., 1]
    valid = np.isfinite(u) & np.isfinite(v) & (np.abs(u) <= FLO_INVALID_THRESHOLD) & (np.abs(v) <= FLO_INVALID_THRESHOLD)
    return FlowField(u, v, valid)


# -- rasters --------------------------------------------------------------------


def _read_png16(path: PathLike, what: str) -> np.ndarray:
    p = _require_file(path, what)
    try:
        with Image.open(p) as img:
            mode = img.mode
            raw = np.array(img)
    except OSError as exc:
        raise FormatError(f"cannot decode image: {exc}", str(p)) from None
    if mode not in ("I;16", "I;16B", "I;16L", "I") or raw.ndim != 2:
        raise FormatError(f"expected a single-channel 16-bit raster, got mode {mode} shape {raw.shape}", str(p))
    if raw.min(initial=0) < 0 or raw.max(initial=0) > 65535:
        raise FormatError("raster values outside the 16-bit range", str(p))
    return raw.astype(np.uint16)


def _write_png16(path: PathLike, raw: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(raw, dtype=np.uint16)).save(Path(path), format="PNG")


def read_depth_png16(path: PathLike, scale: float = DEPTH_SCALE) -> DepthMap:
    """depth = raw / scale metres; raw 0 is invalid."""
    raw = _read_png16(path, "depth raster")
    depth = raw.astype(float) / scale
    depth[raw == 0] = np.nan
    return DepthMap(depth)


def write_depth_png16(path: PathLike, depth: DepthMap, scale: float = DEPTH_SCALE) -> None:
    raw = np.zeros(depth.values.shape)
    raw[depth.valid] = np.rint(depth.values[depth.valid] * scale)
    if raw.max(initial=0) > 65535:
        raise InputError(f"depth {raw.max() / scale:.3f} m does not fit a 16-bit raster at scale {scale}")
    _write_png16(path, raw)


def read_disparity_png16(path: PathLike, intr: Intrinsics, scale: float = DEPTH_SCALE) -> DepthMap:
    """KITTI disparity raster (raw / scale pixels, raw 0 invalid) converted to depth."""
    raw = _read_png16(path, "disparity raster")
    disp = raw.astype(float) / scale
    disp[raw == 0] = np.nan
    return DepthMap(depth_from_disparity(disp, intr))


def read_gray_png(path: PathLike) -> np.ndarray:
    p = _require_file(path, "image")
    try:
        with Image.open(p) as img:
            return np.array(img.convert("L"))
    except OSError as exc:
        raise FormatError(f"cannot decode image: {exc}", str(p)) from None


def write_gray_png(path: PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(Path(path), format="PNG")


# -- calibration --------------------------------------------------------------------

_CALIB_KEYS = ("f_x", "f_y", "c_x", "c_y", "width", "height")


def read_calib(path: PathLike) -> Intrinsics:
    """``key = value`` lines: f_x f_y c_x c_y width height [baseline]."""
    p = _require_file(path, "calibration file")
    values = {}
    for lineno, fields in _data_lines(p):
        line = " ".join(fields)
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {line!r}", str(p), lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CALIB_KEYS + ("baseline",):
            raise FormatError(f"unknown calibration key {key!r}", str(p), lineno)
        try:
            values[key] = int(value) if key in ("width", "height") else float(value)
        except ValueError:
            raise FormatError(f"{key} is not a number: {value!r}", str(p), lineno) from None
    missing = [k for k in _CALIB_KEYS if k not in values]
    if missing:
        raise ConfigError(f"{p}: calibration is missing {', '.join(missing)}")
    return Intrinsics(**values)


def write_calib(path: PathLike, intr: Intrinsics) -> None:
    lines = [f"{k} = {getattr(intr, k)!r}" for k in _CALIB_KEYS]
    if intr.baseline is not None:
        lines.append(f"baseline = {intr.baseline!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- motion records ---------------------------------------------------------------


def write_motion_records(path: PathLike, motions: Sequence[Motion6DoF], index: Optional[dict] = None) -> None:
    """CSV with one column per DoF, plus any extra per-row columns in ``index``."""
    df = pd.DataFrame([m.as_array() for m in motions], columns=list(DOF_NAMES)).reindex(columns=list(DOF_NAMES))
    for name, col in (index or {}).items():
        df.insert(0, name, list(col))
    df.to_csv(path, index=False, float_format="%.17g")


def read_motion_records(path: PathLike) -> list[Motion6DoF]:
    p = _require_file(path, "motion record file")
    try:
        df = pd.read_csv(p, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot parse CSV: {exc}", str(p)) from None
    missing = [d for d in DOF_NAMES if d not in df.columns]
    if missing:
        raise FormatError(f"missing columns {missing}", str(p))
    out = []
    for row, values in enumerate(df[list(DOF_NAMES)].to_numpy(dtype=float), start=2):
        try:
            out.append(Motion6DoF.from_array(values))
        except InputError as exc:
            raise FormatError(str(exc), str(p), row) from None
    return out


# -- vocabulary and loop candidates -------------------------------------------------


def write_vocabulary(path: PathLike, vocab: Vocabulary) -> None:
    header = np.array([(VOCAB_MAGIC, VOCAB_VERSION, vocab.k, vocab.bits)], dtype=_VOCAB_HEADER)
    Path(path).write_bytes(header.tobytes() + vocab.centroids.tobytes())


def read_vocabulary(path: PathLike) -> Vocabulary:
    p = _require_file(path, "vocabulary file")
    buf = p.read_bytes()
    if len(buf) < _VOCAB_HEADER.itemsize:
        raise FormatError(f"truncated header ({len(buf)} bytes)", str(p))
    h = np.frombuffer(buf, dtype=_VOCAB_HEADER, count=1)[0]
    if h["magic"] != VOCAB_MAGIC:
        raise FormatError(f"bad magic {bytes(h['magic'])!r}", str(p))
    if h["version"] != VOCAB_VERSION:
        raise FormatError(f"unsupported vocabulary version {int(h['version'])}", str(p))
    k, bits = int(h["k"]), int(h["bits"])
    if bits != 256:
        raise FormatError(f"unsupported descriptor width {bits}", str(p))
    expected = _VOCAB_HEADER.itemsize + k * bits // 8
    if len(buf) != expected:
        raise FormatError(f"file is {len(buf)} bytes, expected {expected} for k={k}", str(p))
    centroids = np.frombuffer(buf, dtype=np.uint8, offset=_VOCAB_HEADER.itemsize).reshape(k, bits // 8)
    try:
        return Vocabulary(centroids.copy())
    except InputError as exc:
        raise FormatError(str(exc), str(p)) from None


def write_loop_candidates(path: PathLike, candidates: Sequence[LoopCandidate]) -> None:
    lines = ["# i j matches passed"] + [f"{c.i} {c.j} {c.matches} {int(c.passed)}" for c in candidates]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loop_candidates(path: PathLike) -> list[LoopCandidate]:
    """Rows ``i j matches [passed]``; a missing flag means passed."""
    p = _require_file(path, "loop candidate file")
    out = []
    for lineno, fields in _data_lines(p):
        if len(fields) not in (3, 4):
            raise FormatError(f"expected 3 or 4 fields, got {len(fields)}", str(p), lineno)
        try:
            i, j, matches = (int(x) for x in fields[:3])
            passed = bool(int(fields[3])) if len(fields) == 4 else True
            out.append(LoopCandidate(i, j, matches, passed))
        except (ValueError, InputError) as exc:
            raise FormatError(str(exc), str(p), lineno) from None
    return out


# -- pose graph dump ---------------------------------------------------------------

_TRIU7 = np.triu_indices(7)
_TRIU6 = np.triu_indices(6)


G2O_INFORMATION = ("7x7", "6x6")


def dumps_g2o(graph: PoseGraph, information: str = "7x7") -> str:
    """VERTEX_SE3:QUAT / EDGE_SE3:QUAT records. Edges carry the 28 upper-triangular
    entries of the 7x7 information matrix, or with ``information="6x6"`` the 21
    entries of its (t, qx, qy, qz) block, the layout standard g2o readers parse;
    the qw row and column are dropped."""
    if information not in G2O_INFORMATION:
        raise ConfigError(f"unknown g2o information layout {information!r} (7x7|6x6)")
    lines = []
    for k, v in enumerate(graph.nodes):
        lines.append(f"VERTEX_SE3:QUAT {k} {_fmt(v)}")
    lines.append(f"FIX {graph.anchor}")
    for e in graph.edges:
        upper = e.information[:6, :6][_TRIU6] if information == "6x6" else e.information[_TRIU7]
        lines.append(f"EDGE_SE3:QUAT {e.i} {e.j} {_fmt(e.measurement)} {_fmt(upper)}")
    return "\n".join(lines) + "\n"


def _int_field(text: str, path: Path, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise FormatError(f"expected an integer id, got {text!r}", str(path), lineno) from None


def _info_from_upper(values: np.ndarray) -> np.ndarray:
    P = np.zeros((7, 7))
    if len(values) == 28:
        P[_TRIU7] = values
    else:
        # 6x6 over (t, rotation vector) placed over (t, qx, qy, qz); qw unweighted
        P6 = np.zeros((6, 6))
        P6[_TRIU6] = values
        P[:6, :6] = P6
    return P + np.triu(P, 1).T


def loads_g2o(text: str, path: Optional[str] = None) -> PoseGraph:
    nodes: dict[int, np.ndarray] = {}
    raw_edges = []
    anchor = 0
    p = Path(path) if path else Path("<g2o>")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields or fields[0].startswith("#"):
            continue
        tag = fields[0]
        if tag == "VERTEX_SE3:QUAT":
            if len(fields) != 9:
                raise FormatError(f"vertex needs 9 fields, got {len(fields)}", path, lineno)
            nodes[_int_field(fields[1], p, lineno)] = _floats(fields[2:], p, lineno)
        elif tag == "EDGE_SE3:QUAT":
            if len(fields) not in (3 + 7 + 28, 3 + 7 + 21):
                raise FormatError(f"edge needs 38 or 31 fields, got {len(fields)}", path, lineno)
            values = _floats(fields[3:], p, lineno)
            i, j = _int_field(fields[1], p, lineno), _int_field(fields[2], p, lineno)
            raw_edges.append((lineno, i, j, values[:7], _info_from_upper(values[7:])))
        elif tag == "FIX":
            if len(fields) != 2:
                raise FormatError("FIX needs one vertex id", path, lineno)
            anchor = _int_field(fields[1], p, lineno)
        else:
            raise FormatError(f"unknown record {tag!r}", path, lineno)
    if sorted(nodes) != list(range(len(nodes))):
        raise FormatError("vertex ids must be 0..n-1", path)
    try:
        graph = PoseGraph(np.array([nodes[k] for k in range(len(nodes))]).reshape(-1, 7), [], anchor)
    except ValueError as exc:
        raise FormatError(str(exc), path) from None
    for lineno, i, j, meas, info in raw_edges:
        kind = CONSECUTIVE if abs(j - i) == 1 else LOOP
        try:
            graph.add_edge(MotionEdge(i, j, meas, info, kind))
        except ValueError as exc:
            raise FormatError(str(exc), path, lineno) from None
    return graph


def write_g2o(path: PathLike, graph: PoseGraph, information: str = "7x7") -> None:
    Path(path).write_text(dumps_g2o(graph, information), encoding="utf-8")


def read_g2o(path: PathLike) -> PoseGraph:
    p = _require_file(path, "graph file")
    return loads_g2o(p.read_text(encoding="utf-8"), str(p))


# -- manifests ------------------------------------------------------------------------


def write_manifest(path: PathLike, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: PathLike) -> dict:
    p = _require_file(path, "manifest")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, str(p), exc.lineno) from None
