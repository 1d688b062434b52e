"""Training-time augmentation: gt-sampling paste, flip, global rotation and scaling."""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ssk.geom.boxes import CLASS_NAMES, Box3D, points_in_box, wrap_angle
from ssk.geom.iou import bev_intersection
from ssk.pcio.formats import PointCloud, Scene, list_scenes, load_scene, save_scene

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    rotation: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale: tuple[float, float] = (0.95, 1.05)
    flip_prob: float = 0.5
    sample_counts: tuple[int, ...] = (3, 3, 3)

    def __post_init__(self):
        if self.rotation[0] > self.rotation[1] or self.scale[0] > self.scale[1]:
            raise ValueError(f"Augmentation ranges must be ordered: {self.rotation}, {self.scale}")
        if self.scale[0] <= 0:
            raise ValueError(f"Scale factors must be positive, got {self.scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if len(self.sample_counts) != len(CLASS_NAMES) or min(self.sample_counts) < 0:
            raise ValueError(f"sample_counts needs {len(CLASS_NAMES)} non-negative entries, got {self.sample_counts}")


@dataclass(frozen=True)
class GtSample:
    box: Box3D
    cloud: PointCloud


class GtLibrary:
    """Objects cut out of prior scenes, pasted back at their original pose."""

    def __init__(self, samples: list[GtSample] | None = None):
        self.samples = list(samples or [])

    def __len__(self) -> int:
        return len(self.samples)

    def add_scene(self, scene: Scene) -> None:
        for box in scene.gt_boxes:
            inside = points_in_box(scene.cloud.xyz, box)
            if inside.any():
                self.samples.append(GtSample(box, scene.cloud.subset(inside)))

    def by_class(self, class_id: int) -> list[GtSample]:
        return [s for s in self.samples if s.box.class_id == class_id]

    @classmethod
    def from_scenes(cls, scenes: list[Scene]) -> "GtLibrary":
        library = cls()
        for scene in scenes:
            library.add_scene(scene)
        return library

    def save(self, directory: Path | str) -> Path:
        """Write each sample as a one-box scene pair ``<index>.bin`` + ``<index>.txt``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, sample in enumerate(self.samples):
            save_scene(Scene(sample.cloud, [sample.box], f"{i:06d}"), directory)
        logger.info(f"Saved {len(self.samples)} gt samples to {directory}")
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "GtLibrary":
        """
        Read a database written by ``save``, in file order.

        Raises:
            FileNotFoundError: If the directory does not exist
            ValueError: If an entry does not hold exactly one box
        """
        samples = []
        for path in list_scenes(directory):
            scene = load_scene(path)
            if len(scene.gt_boxes) != 1:
                raise ValueError(f"gt sample {path} must hold one box, found {len(scene.gt_boxes)}")
            samples.append(GtSample(scene.gt_boxes[0], scene.cloud))
        logger.info(f"Loaded {len(samples)} gt samples from {directory}")
        return cls(samples)


def paste_objects(scene: Scene, library: GtLibrary, counts: tuple[int, ...], rng: np.random.Generator) -> Scene:
    """
    Paste up to ``counts[c]`` library objects of each class.

    A candidate colliding in BEV with any box already present is skipped.
    Scene points inside an accepted box are replaced by the sample's points.
    """
    boxes = list(scene.gt_boxes)
    cloud = scene.cloud
    for class_id, count in enumerate(counts):
        pool = library.by_class(class_id)
        if not pool or count == 0:
            continue
        for pick in rng.choice(len(pool), size=min(count, len(pool)), replace=False):
            sample = pool[int(pick)]
            candidate = sample.box.as_array()
            if any(bev_intersection(candidate, b.as_array()) > 0.0 for b in boxes):
                continue
            keep = ~points_in_box(cloud.xyz, sample.box)
            cloud = PointCloud(
                np.concatenate([cloud.xyz[keep], sample.cloud.xyz]),
                np.concatenate([cloud.reflectance[keep], sample.cloud.reflectance]),
            )
            boxes.append(sample.box)
    return Scene(cloud, boxes, scene.id)


def flip_scene(scene: Scene) -> Scene:
    """Mirror across the x-axis: y -> -y, yaw -> -yaw."""
    xyz = scene.cloud.xyz * np.array([1.0, -1.0, 1.0])
    boxes = [
        replace(b, center=(b.center[0], -b.center[1], b.center[2]), yaw=wrap_angle(-b.yaw))
        for b in scene.gt_boxes
    ]
    return Scene(PointCloud(xyz, scene.cloud.reflectance), boxes, scene.id)


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rotate points and boxes about the z-axis through the origin."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = scene.cloud.xyz @ rot.T
    boxes = [
        replace(b, center=tuple(rot @ np.asarray(b.center)), yaw=wrap_angle(b.yaw + angle))
        for b in scene.gt_boxes
    ]
    return Scene(PointCloud(xyz, scene.cloud.reflectance), boxes, scene.id)


def scale_scene(scene: Scene, factor: float) -> Scene:
    boxes = [
        replace(b, center=tuple(np.asarray(b.center) * factor), dims=tuple(np.asarray(b.dims) * factor))
        for b in scene.gt_boxes
    ]
    return Scene(PointCloud(scene.cloud.xyz * factor, scene.cloud.reflectance), boxes, scene.id)


def augment(scene: Scene, seed: int, config: AugmentConfig | None = None, library: GtLibrary | None = None) -> Scene:
    """
    Apply gt-sampling, then a random flip, rotation and scale.

    The result is not cropped; callers crop to their voxel range.
    """
    config = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    if library is not None and len(library):
        scene = paste_objects(scene, library, config.sample_counts, rng)
    flip = rng.uniform() < config.flip_prob
    if flip:
        scene = flip_scene(scene)
    angle = float(rng.uniform(*config.rotation))
    if angle != 0.0:
        scene = rotate_scene(scene, angle)
    factor = float(rng.uniform(*config.scale))
    if factor != 1.0:
        scene = scale_scene(scene, factor)
    logger.debug(f"Scene {scene.id}: flip={flip} rotation={angle:.3f} scale={factor:.3f}, {len(scene.gt_boxes)} boxes")
    return scene
