"""Anchor grid over the fused BEV map and per-anchor RPN target assignment."""

import math
from dataclasses import dataclass, field

import numpy as np

from ssk.geom.boxes import CLASS_NAMES, Box3D, boxes_to_array, encode_box_residual
from ssk.geom.iou import iou_matrix
from ssk.geom.voxel_spec import VoxelSpec

ANCHOR_YAWS = (0.0, math.pi / 2)

FOREGROUND = 1
BACKGROUND = 0
IGNORE = -1


@dataclass(frozen=True)
class AnchorConfig:
    """One canonical size per class with its matching thresholds."""

    sizes: tuple[tuple[float, float, float], ...] = ((3.9, 1.6, 1.56), (0.8, 0.6, 1.73), (1.76, 0.6, 1.73))
    z_centers: tuple[float, ...] = (-1.0, -0.915, -0.915)
    pos_iou: tuple[float, ...] = (0.6, 0.5, 0.5)
    neg_iou: tuple[float, ...] = (0.45, 0.35, 0.35)

    def __post_init__(self):
        n = len(CLASS_NAMES)
        if not (len(self.sizes) == len(self.z_centers) == len(self.pos_iou) == len(self.neg_iou) == n):
            raise ValueError(f"Anchor config needs one entry per class ({n})")
        for pos, neg in zip(self.pos_iou, self.neg_iou, strict=True):
            if not 0.0 <= neg <= pos <= 1.0:
                raise ValueError(f"Anchor thresholds must satisfy 0 <= neg <= pos <= 1, got {neg}, {pos}")

    @property
    def num_classes(self) -> int:
        return len(self.sizes)

    @property
    def per_cell(self) -> int:
        return self.num_classes * len(ANCHOR_YAWS)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors in (y, x, class, yaw) order."""

    boxes: np.ndarray
    classes: np.ndarray
    height: int
    width: int
    config: AnchorConfig = field(default_factory=AnchorConfig)

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(spec: VoxelSpec, config: AnchorConfig | None = None) -> AnchorGrid:
    """Anchors centered on every BEV cell of ``spec`` (H = grid y, W = grid x)."""
    config = config or AnchorConfig()
    w, h, _ = spec.grid_dims
    xs = (np.arange(w) + 0.5) * spec.voxel_size[0] + spec.range_min[0]
    ys = (np.arange(h) + 0.5) * spec.voxel_size[1] + spec.range_min[1]
    rows, classes = [], []
    for y in ys:
        for x in xs:
            for c, (size, z) in enumerate(zip(config.sizes, config.z_centers, strict=True)):
                for yaw in ANCHOR_YAWS:
                    rows.append((x, y, z, *size, yaw))
                    classes.append(c)
    return AnchorGrid(np.array(rows, dtype=np.float64).reshape(-1, 7), np.array(classes, dtype=np.int64), h, w, config)


@dataclass(frozen=True)
class RpnTargets:
    labels: np.ndarray
    residuals: np.ndarray
    matched_gt: np.ndarray

    @property
    def num_foreground(self) -> int:
        return int(np.sum(self.labels == FOREGROUND))


def assign_rpn_targets(anchors: AnchorGrid, gt_boxes: list[Box3D]) -> RpnTargets:
    """
    Per-class BEV-IoU matching.

    Anchors reaching the class's positive threshold are foreground, those
    below the negative threshold background, the rest ignored. Every gt is
    also forced onto its best-overlapping anchor of its class.
    """
    n = len(anchors)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    residuals = np.zeros((n, 7))
    matched = np.full(n, -1, dtype=np.int64)
    if not gt_boxes or n == 0:
        return RpnTargets(labels, residuals, matched)

    gt = boxes_to_array(gt_boxes)
    gt_classes = np.array([b.class_id for b in gt_boxes])
    iou = iou_matrix(anchors.boxes, gt, "bev")
    iou[anchors.classes[:, None] != gt_classes[None, :]] = 0.0

    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    pos = np.asarray(anchors.config.pos_iou)[anchors.classes]
    neg = np.asarray(anchors.config.neg_iou)[anchors.classes]
    labels[(best_iou >= neg) & (best_iou < pos)] = IGNORE
    fg = best_iou >= pos
    labels[fg] = FOREGROUND
    matched[fg] = best_gt[fg]

    for j in range(len(gt_boxes)):
        best_anchor = int(np.argmax(iou[:, j]))
        if iou[best_anchor, j] > 0.0:
            labels[best_anchor] = FOREGROUND
            matched[best_anchor] = j

    rows = np.nonzero(labels == FOREGROUND)[0]
    residuals[rows] = encode_box_residual(gt[matched[rows]], anchors.boxes[rows])
    return RpnTargets(labels, residuals, matched)
