"""Scene containers and on-disk formats: point binaries, label text, detections and PLY."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ssk.geom.boxes import CLASS_NAMES, Box3D
from ssk.geom.voxel_spec import VoxelSpec

logger = logging.getLogger(__name__)

POINT_DTYPE = np.dtype("<f4")
POINT_ROW_BYTES = 16
POINT_SUFFIX = ".bin"
LABEL_SUFFIX = ".txt"


class LabelParseError(ValueError):
    """A malformed line in a label file."""

    def __init__(self, path: Path | str, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


@dataclass
class PointCloud:
    """N points with positions (m) and reflectance in [0, 1]."""

    xyz: np.ndarray
    reflectance: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.reflectance = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
        if len(self.reflectance) != len(self.xyz):
            raise ValueError(f"{len(self.xyz)} points but {len(self.reflectance)} reflectance values")
        if not (np.all(np.isfinite(self.xyz)) and np.all(np.isfinite(self.reflectance))):
            raise ValueError("Point cloud contains non-finite values")

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.reflectance[mask])

    def as_rows(self) -> np.ndarray:
        return np.concatenate([self.xyz, self.reflectance[:, None]], axis=1)


@dataclass
class Scene:
    cloud: PointCloud
    gt_boxes: list[Box3D] = field(default_factory=list)
    id: str = ""


def crop_cloud(cloud: PointCloud, spec: VoxelSpec) -> PointCloud:
    """Keep points inside the half-open voxel range."""
    return cloud.subset(spec.contains(cloud.xyz))


def crop_scene(scene: Scene, spec: VoxelSpec) -> Scene:
    """Crop points to the range and drop boxes whose centers leave it."""
    lo, hi = np.asarray(spec.range_min), np.asarray(spec.range_max)
    boxes = [b for b in scene.gt_boxes if np.all(np.asarray(b.center) >= lo) and np.all(np.asarray(b.center) < hi)]
    return Scene(crop_cloud(scene.cloud, spec), boxes, scene.id)


def read_point_cloud(path: Path | str) -> PointCloud:
    """
    Read a KITTI-style binary: rows of four little-endian float32 (x, y, z, r).

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the file is truncated or holds non-finite values
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Point file not found: {path}")
    data = path.read_bytes()
    if len(data) % POINT_ROW_BYTES:
        raise ValueError(f"Truncated point file {path}: {len(data)} bytes is not a multiple of {POINT_ROW_BYTES}")
    rows = np.frombuffer(data, dtype=POINT_DTYPE).reshape(-1, 4)
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"Non-finite values in point file {path}")
    return PointCloud(rows[:, :3].astype(np.float64), rows[:, 3].astype(np.float64))


def write_point_cloud(cloud: PointCloud, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(cloud.as_rows().astype(POINT_DTYPE).tobytes())


def _class_id(name: str) -> int:
    if name in CLASS_NAMES:
        return CLASS_NAMES.index(name)
    raise ValueError(f"unknown class '{name}', expected one of {CLASS_NAMES}")


def read_labels(path: Path | str) -> list[Box3D]:
    """
    Parse ``class cx cy cz l w h yaw`` lines in the LiDAR frame.

    Blank lines and ``#`` comments are skipped.

    Raises:
        FileNotFoundError: If the file does not exist
        LabelParseError: On the first malformed line
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Label file not found: {path}")
    boxes = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise LabelParseError(path, number, f"expected 8 fields, got {len(parts)}")
        try:
            values = [float(v) for v in parts[1:]]
            boxes.append(Box3D(tuple(values[:3]), tuple(values[3:6]), values[6], _class_id(parts[0])))
        except ValueError as e:
            raise LabelParseError(path, number, str(e)) from e
    return boxes


def format_box(box: Box3D, score: float | None = None) -> str:
    fields = [CLASS_NAMES[box.class_id], *(repr(v) for v in box.center), *(repr(v) for v in box.dims), repr(box.yaw)]
    if score is not None:
        fields.append(repr(float(score)))
    return " ".join(fields)


def write_labels(boxes: list[Box3D], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_box(b) + "\n" for b in boxes), encoding="utf-8")


def write_detections(detections, path: Path | str) -> None:
    """Label lines with a trailing score column, one per detection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_box(d.box, d.score) + "\n" for d in detections), encoding="utf-8")


def read_detections(path: Path | str) -> list[tuple[Box3D, float]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Detection file not found: {path}")
    out = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 9:
            raise LabelParseError(path, number, f"expected 9 fields, got {len(parts)}")
        try:
            values = [float(v) for v in parts[1:]]
            score = values[7]
            if not math.isfinite(score):
                raise ValueError(f"non-finite score {score}")
            out.append((Box3D(tuple(values[:3]), tuple(values[3:6]), values[6], _class_id(parts[0])), score))
        except ValueError as e:
            raise LabelParseError(path, number, str(e)) from e
    return out


def save_scene(scene: Scene, directory: Path | str) -> tuple[Path, Path]:
    directory = Path(directory)
    points_path = directory / f"{scene.id}{POINT_SUFFIX}"
    labels_path = directory / f"{scene.id}{LABEL_SUFFIX}"
    write_point_cloud(scene.cloud, points_path)
    write_labels(scene.gt_boxes, labels_path)
    return points_path, labels_path


def load_scene(points_path: Path | str) -> Scene:
    """Load a point binary and its sibling label file (missing labels mean no boxes)."""
    points_path = Path(points_path)
    labels_path = points_path.with_suffix(LABEL_SUFFIX)
    boxes = read_labels(labels_path) if labels_path.is_file() else []
    return Scene(read_point_cloud(points_path), boxes, points_path.stem)


def list_scenes(directory: Path | str) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Scene directory not found: {directory}")
    return sorted(directory.glob(f"*{POINT_SUFFIX}"))


def write_ply(path: Path | str, xyz: np.ndarray, tags: np.ndarray, tag_name: str = "source") -> None:
    """ASCII PLY with per-vertex x y z and one integer tag property."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    tags = np.asarray(tags, dtype=np.int64).reshape(-1)
    if len(tags) != len(xyz):
        raise ValueError(f"{len(xyz)} vertices but {len(tags)} tags")
    header = "\n".join(
        [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(xyz)}",
            "property float x",
            "property float y",
            "property float z",
            f"property int {tag_name}",
            "end_header",
        ]
    )
    rows = np.concatenate([xyz, tags[:, None].astype(np.float64)], axis=1)
    np.savetxt(path, rows, fmt=["%.6f", "%.6f", "%.6f", "%d"], header=header, delimiter=" ", comments="")
    logger.info(f"Wrote {len(xyz)} vertices to {path}")


def read_ply(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """Read back a file written by :func:`write_ply`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        end = lines.index("end_header")
    except ValueError as e:
        raise ValueError(f"Missing end_header in {path}") from e
    count = next(int(line.split()[-1]) for line in lines if line.startswith("element vertex"))
    if count == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    rows = np.loadtxt(lines[end + 1:end + 1 + count], ndmin=2)
    return rows[:, :3], rows[:, 3].astype(np.int64)
