"""Dataset directory layout, raster formats and validated ingestion.

Layout of a sequence directory::

    intrinsics.txt        fx fy cx cy width height
                          qx qy qz qw tx ty tz        (IMU->camera extrinsics)
    imu.csv               t,wx,wy,wz,ax,ay,az          (SI units, header row)
    poses.txt             t tx ty tz qx qy qz qw       (row i belongs to frame i)
    frames/000000/
        image.png         8-bit grayscale
        sparse.csv        u,v,depth  (pixels, meters; header row)
        pred_inv.pfm      optional predicted inverse depth, 32-bit float 1/m
        gt_depth.png      optional ground truth, 16-bit millimeters, 0=invalid
        tracks.csv        optional feature_id,u,v bearing observations (pixels)

Depth PNGs quantize to millimeters; PFM keeps full float precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .depthmap import SparseMetricPoint
from .errors import DimensionMismatch, MissingFile, ParseError, VioDenseError
from .geometry import CameraIntrinsics, Extrinsics, Pose, UnitQuaternion
from .msckf import ImuSample

logger = logging.getLogger(__name__)

FLOAT_FMT = "%.9g"


# --- raster formats ----------------------------------------------------------


def write_pfm(path, array: np.ndarray):
    """Grayscale PFM, little endian, rows bottom-to-top."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(array[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ParseError(path, f"not a grayscale PFM (header {header!r})", line=1)
        dims = f.readline().split()
        if len(dims) != 2:
            raise ParseError(path, "malformed PFM dimension line", line=2)
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
        if data.size != w * h:
            raise ParseError(path, f"PFM payload has {data.size} floats, expected {w * h}")
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_depth_png(path, depth_m: np.ndarray):
    """16-bit millimeter PNG; non-finite or non-positive depths become 0 (invalid)."""
    depth = np.asarray(depth_m, dtype=float)
    mm = np.where(np.isfinite(depth) & (depth > 0), np.round(depth * 1000.0), 0.0)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path) -> np.ndarray:
    """Depth in meters with NaN where the PNG stores 0."""
    mm = np.asarray(Image.open(path), dtype=np.float64)
    return np.where(mm > 0, mm / 1000.0, np.nan)


def write_gray_png(path, image01: np.ndarray):
    arr = np.clip(np.asarray(image01, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def read_gray_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


# --- text formats ------------------------------------------------------------


def write_calibration(path, intr: CameraIntrinsics, ext: Extrinsics):
    with open(path, "w") as f:
        f.write(
            " ".join(
                FLOAT_FMT % v for v in (intr.fx, intr.fy, intr.cx, intr.cy)
            )
            + f" {intr.width} {intr.height}\n"
        )
        q = ext.rotation
        vals = (q.x, q.y, q.z, q.w, *ext.translation)
        f.write(" ".join(FLOAT_FMT % v for v in vals) + "\n")


def read_calibration(path) -> tuple[CameraIntrinsics, Extrinsics]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    lines = path.read_text().strip().splitlines()
    if len(lines) < 2:
        raise ParseError(path, "expected two lines: intrinsics and extrinsics")
    first = lines[0].split()
    if len(first) != 6:
        raise ParseError(path, f"intrinsics line needs 6 values, got {len(first)}", line=1)
    try:
        fx, fy, cx, cy = map(float, first[:4])
        width, height = int(first[4]), int(first[5])
        intr = CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as exc:
        raise ParseError(path, str(exc), line=1) from exc
    second = lines[1].split()
    if len(second) != 7:
        raise ParseError(path, f"extrinsics line needs 7 values, got {len(second)}", line=2)
    try:
        qx, qy, qz, qw, tx, ty, tz = map(float, second)
        ext = Extrinsics(UnitQuaternion(qx, qy, qz, qw), np.array([tx, ty, tz]))
    except ValueError as exc:
        raise ParseError(path, str(exc), line=2) from exc
    return intr, ext


def write_imu_csv(path, samples: list[ImuSample]):
    with open(path, "w") as f:
        f.write("t,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            row = [s.timestamp, *s.angular_velocity, *s.linear_acceleration]
            f.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def read_imu_csv(path) -> list[ImuSample]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    samples = []
    last_t = -np.inf
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or (lineno == 1 and line.lower().startswith("t,")):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ParseError(path, f"expected 7 columns, got {len(parts)}", line=lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(path, str(exc), line=lineno) from exc
            if vals[0] <= last_t:
                raise ParseError(path, "IMU timestamps must be strictly increasing", line=lineno)
            last_t = vals[0]
            samples.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


def write_poses_txt(path, poses: list[tuple[float, Pose]]):
    with open(path, "w") as f:
        for t, pose in poses:
            q = pose.rotation
            row = [t, *pose.translation, q.x, q.y, q.z, q.w]
            f.write(" ".join(FLOAT_FMT % v for v in row) + "\n")


def read_poses_txt(path) -> list[tuple[float, Pose]]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(path, f"expected 8 columns (t tx ty tz qx qy qz qw), got {len(parts)}", line=lineno)
            try:
                t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            except ValueError as exc:
                raise ParseError(path, str(exc), line=lineno) from exc
            poses.append((t, Pose(UnitQuaternion(qx, qy, qz, qw), np.array([tx, ty, tz]))))
    return poses


def write_sparse_csv(path, points: list[SparseMetricPoint]):
    with open(path, "w") as f:
        f.write("u,v,depth\n")
        for p in points:
            f.write(",".join(FLOAT_FMT % v for v in (p.u, p.v, p.depth)) + "\n")


def read_sparse_csv(path) -> list[SparseMetricPoint]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    points = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or (lineno == 1 and line.lower().startswith("u,")):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(path, f"expected 3 columns (u,v,depth), got {len(parts)}", line=lineno)
            try:
                u, v, d = map(float, parts)
                points.append(SparseMetricPoint(u, v, d))
            except ValueError as exc:
                raise ParseError(path, str(exc), line=lineno) from exc
    return points


def write_tracks_csv(path, bearings: list[tuple[int, np.ndarray]]):
    with open(path, "w") as f:
        f.write("feature_id,u,v\n")
        for fid, uv in bearings:
            f.write(f"{fid}," + ",".join(FLOAT_FMT % v for v in uv) + "\n")


def read_tracks_csv(path) -> list[tuple[int, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or (lineno == 1 and line.lower().startswith("feature_id")):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(path, f"expected 3 columns (feature_id,u,v), got {len(parts)}", line=lineno)
            try:
                out.append((int(parts[0]), np.array([float(parts[1]), float(parts[2])])))
            except ValueError as exc:
                raise ParseError(path, str(exc), line=lineno) from exc
    return out


# --- sequence dataset ----------------------------------------------------------


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    pose: Pose
    directory: Path

    @property
    def image_path(self) -> Path:
        return self.directory / "image.png"

    @property
    def sparse_path(self) -> Path:
        return self.directory / "sparse.csv"

    @property
    def pred_path(self) -> Path:
        return self.directory / "pred_inv.pfm"

    @property
    def gt_path(self) -> Path:
        return self.directory / "gt_depth.png"

    @property
    def tracks_path(self) -> Path:
        return self.directory / "tracks.csv"


@dataclass
class SequenceDataset:
    root: Path
    intrinsics: CameraIntrinsics
    extrinsics: Extrinsics
    imu: list
    frames: list[FrameRecord]

    def load_image(self, i: int) -> np.ndarray:
        return read_gray_png(self.frames[i].image_path)

    def load_sparse(self, i: int) -> list[SparseMetricPoint]:
        return read_sparse_csv(self.frames[i].sparse_path)

    def load_pred_inv(self, i: int) -> np.ndarray | None:
        p = self.frames[i].pred_path
        return read_pfm(p) if p.exists() else None

    def load_gt_depth(self, i: int) -> np.ndarray | None:
        p = self.frames[i].gt_path
        return read_depth_png(p) if p.exists() else None

    def load_tracks(self, i: int) -> list[tuple[int, np.ndarray]]:
        p = self.frames[i].tracks_path
        return read_tracks_csv(p) if p.exists() else []


def frame_dir(root, index: int) -> Path:
    return Path(root) / "frames" / f"{index:06d}"


def ingest(root) -> SequenceDataset:
    """Load and fully validate a sequence directory.

    Every malformed file found is reported; the first problem's exception
    type is raised when there is exactly one, otherwise a combined error.
    """
    root = Path(root)
    issues: list[Exception] = []
    if not root.is_dir():
        raise MissingFile(f"dataset directory {root} does not exist")

    intr = ext = None
    try:
        intr, ext = read_calibration(root / "intrinsics.txt")
    except VioDenseError as exc:
        issues.append(exc)

    imu = []
    try:
        imu = read_imu_csv(root / "imu.csv")
    except VioDenseError as exc:
        issues.append(exc)

    poses: list[tuple[float, Pose]] = []
    try:
        poses = read_poses_txt(root / "poses.txt")
    except VioDenseError as exc:
        issues.append(exc)

    frames_root = root / "frames"
    frame_dirs = sorted(frames_root.iterdir()) if frames_root.is_dir() else []
    if not frame_dirs:
        issues.append(MissingFile(f"{frames_root} has no frame directories"))
    if poses and frame_dirs and len(poses) != len(frame_dirs):
        issues.append(
            ParseError(root / "poses.txt", f"{len(poses)} pose rows for {len(frame_dirs)} frames")
        )
    if poses:
        times = [t for t, _ in poses]
        if any(b <= a for a, b in zip(times, times[1:])):
            issues.append(ParseError(root / "poses.txt", "pose timestamps must be strictly increasing"))

    frames = []
    for i, d in enumerate(frame_dirs):
        t, pose = poses[i] if i < len(poses) else (float(i), Pose.identity())
        rec = FrameRecord(i, t, pose, d)
        if not rec.image_path.exists():
            issues.append(MissingFile(str(rec.image_path)))
        elif intr is not None:
            w, h = Image.open(rec.image_path).size
            if (h, w) != (intr.height, intr.width):
                issues.append(
                    DimensionMismatch(f"{rec.image_path}: image is {w}x{h}, intrinsics say {intr.width}x{intr.height}")
                )
        if not rec.sparse_path.exists():
            issues.append(MissingFile(str(rec.sparse_path)))
        else:
            try:
                pts = read_sparse_csv(rec.sparse_path)
                if intr is not None:
                    for p in pts:
                        if not (0 <= p.u <= intr.width - 1 and 0 <= p.v <= intr.height - 1):
                            issues.append(ParseError(rec.sparse_path, f"point ({p.u}, {p.v}) outside image"))
                            break
            except VioDenseError as exc:
                issues.append(exc)
        for optional, reader in ((rec.pred_path, read_pfm), (rec.gt_path, read_depth_png)):
            if optional.exists():
                try:
                    arr = reader(optional)
                    if intr is not None and arr.shape != (intr.height, intr.width):
                        issues.append(
                            DimensionMismatch(
                                f"{optional}: grid {arr.shape[1]}x{arr.shape[0]} does not match image "
                                f"{intr.width}x{intr.height}"
                            )
                        )
                except VioDenseError as exc:
                    issues.append(exc)
        if rec.tracks_path.exists():
            try:
                read_tracks_csv(rec.tracks_path)
            except VioDenseError as exc:
                issues.append(exc)
        frames.append(rec)

    if issues:
        for exc in issues[1:]:
            logger.error("dataset issue: %s", exc)
        if len(issues) == 1:
            raise issues[0]
        summary = "\n".join(f"- {e}" for e in issues)
        raise VioDenseError(f"dataset has {len(issues)} problems:\n{summary}")

    return SequenceDataset(root, intr, ext, imu, frames)


def write_sequence(
    root,
    intr: CameraIntrinsics,
    ext: Extrinsics,
    imu: list[ImuSample],
    frames: list[dict],
):
    """Write a full sequence directory.

    Each frame dict carries: timestamp, pose, image (float01), sparse
    (points), and optionally pred_inv (1/m grid), gt_depth (meters grid),
    tracks (bearing list).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_calibration(root / "intrinsics.txt", intr, ext)
    write_imu_csv(root / "imu.csv", imu)
    write_poses_txt(root / "poses.txt", [(f["timestamp"], f["pose"]) for f in frames])
    for i, f in enumerate(frames):
        d = frame_dir(root, i)
        d.mkdir(parents=True, exist_ok=True)
        write_gray_png(d / "image.png", f["image"])
        write_sparse_csv(d / "sparse.csv", f["sparse"])
        if f.get("pred_inv") is not None:
            write_pfm(d / "pred_inv.pfm", f["pred_inv"])
        if f.get("gt_depth") is not None:
            write_depth_png(d / "gt_depth.png", f["gt_depth"])
        if f.get("tracks") is not None:
            write_tracks_csv(d / "tracks.csv", f["tracks"])
