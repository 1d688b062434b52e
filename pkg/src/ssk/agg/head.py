"""Second-stage refinement head: confidence and box residual per proposal."""

import math
from dataclasses import dataclass

import numpy as np

from ssk.bev.rpn import Proposal
from ssk.geom.boxes import Box3D, boxes_to_array, decode_box_residual, encode_box_residual
from ssk.geom.iou import iou_matrix, rotated_nms
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import Fcn, Linear, Module
from ssk.nn.params import ParamStore

RESIDUAL_CLIP = 8.0


@dataclass(frozen=True)
class HeadConfig:
    theta_h: float = 0.75
    theta_l: float = 0.25
    theta_reg: float = 0.55
    num_samples: int = 64
    fg_fraction: float = 0.25
    hidden: int = 256

    def __post_init__(self):
        if not 0.0 <= self.theta_l < self.theta_h <= 1.0:
            raise ValueError(f"Head thresholds need 0 <= theta_l < theta_h <= 1, got {self.theta_l}, {self.theta_h}")
        if not 0.0 <= self.theta_reg <= 1.0:
            raise ValueError(f"theta_reg must lie in [0, 1], got {self.theta_reg}")
        if self.num_samples < 1 or not 0.0 <= self.fg_fraction <= 1.0:
            raise ValueError(f"Invalid proposal sampling: {self.num_samples}, {self.fg_fraction}")


@dataclass
class HeadOutput:
    """Confidence logits (P) and refinement residuals (P×7)."""

    logits: Tensor
    residuals: Tensor

    @property
    def confidence(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.value))


@dataclass(frozen=True)
class HeadTargets:
    iou: np.ndarray
    confidence: np.ndarray
    residuals: np.ndarray
    regress: np.ndarray


class RefinementHead(Module):
    def __init__(self, store: ParamStore, cin: int, rng: np.random.Generator, hidden: int = 256, name: str = "head"):
        super().__init__(store, name)
        self.shared1 = Fcn(store, f"{name}.shared1", cin, hidden, rng)
        self.shared2 = Fcn(store, f"{name}.shared2", hidden, hidden, rng)
        self.conf = Linear(store, f"{name}.conf", hidden, 1, rng)
        self.reg = Linear(store, f"{name}.reg", hidden, 7, rng)

    def forward(self, tape: Tape, pooled: Tensor) -> HeadOutput:
        x = self.shared2(tape, self.shared1(tape, pooled))
        return HeadOutput(self.conf(tape, x).reshape(pooled.shape[0]), self.reg(tape, x))


def confidence_target(iou, theta_l: float, theta_h: float):
    """0 below theta_l, 1 above theta_h, linear in between."""
    iou = np.asarray(iou, dtype=np.float64)
    target = np.clip((iou - theta_l) / (theta_h - theta_l), 0.0, 1.0)
    return float(target) if target.ndim == 0 else target


def assign_head_targets(proposals: list[Proposal], gt_boxes: list[Box3D], config: HeadConfig) -> HeadTargets:
    """3D IoU of each proposal with its best same-class gt, and the derived targets."""
    n = len(proposals)
    iou = np.zeros(n)
    residuals = np.zeros((n, 7))
    if n and gt_boxes:
        props = boxes_to_array([p.box for p in proposals])
        gt = boxes_to_array(gt_boxes)
        matrix = iou_matrix(props, gt, "3d")
        same = np.array([p.box.class_id for p in proposals])[:, None] == np.array([b.class_id for b in gt_boxes])[None, :]
        matrix[~same] = 0.0
        best = matrix.argmax(axis=1)
        iou = matrix[np.arange(n), best]
        residuals = encode_box_residual(gt[best], props)
    regress = iou >= config.theta_reg
    residuals[~regress] = 0.0
    return HeadTargets(iou, confidence_target(iou, config.theta_l, config.theta_h) * np.ones(n), residuals, regress)


def sample_proposals(iou: np.ndarray, config: HeadConfig) -> np.ndarray:
    """
    Choose up to ``num_samples`` proposals, at least ``fg_fraction`` of them
    strictly above theta_reg when that many exist. Highest IoU first in each pool.
    """
    iou = np.asarray(iou, dtype=np.float64)
    order = np.lexsort((np.arange(len(iou)), -iou))
    fg = order[iou[order] > config.theta_reg]
    bg = order[iou[order] <= config.theta_reg]
    quota = int(math.ceil(config.fg_fraction * config.num_samples))
    n_fg = min(len(fg), max(quota, config.num_samples - len(bg)))
    n_bg = min(len(bg), config.num_samples - n_fg)
    return np.sort(np.concatenate([fg[:n_fg], bg[:n_bg]])).astype(np.int64)


def final_decode(
    proposals: list[Proposal],
    head: HeadOutput,
    nms_iou: float,
    score_threshold: float = 0.0,
) -> list[Proposal]:
    """Refine every proposal, score it by its confidence, suppress, then threshold."""
    if not proposals:
        return []
    props = boxes_to_array([p.box for p in proposals])
    boxes = decode_box_residual(np.clip(head.residuals.value, -RESIDUAL_CLIP, RESIDUAL_CLIP), props)
    scores = head.confidence
    keep = rotated_nms(boxes, scores, nms_iou)
    return [
        Proposal(Box3D.from_array(boxes[i], proposals[i].box.class_id), float(scores[i]))
        for i in keep
        if scores[i] >= score_threshold
    ]
