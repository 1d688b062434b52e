"""Region proposal heads over the fused BEV map and proposal decoding."""

import math
from dataclasses import dataclass

import numpy as np

from ssk.bev.anchors import AnchorGrid
from ssk.bev.encoder2d import BevMap
from ssk.geom.boxes import Box3D, decode_box_residual
from ssk.geom.iou import rotated_nms
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import Conv2d, Module
from ssk.nn.params import ParamStore

PRIOR_PROBABILITY = 0.01
RESIDUAL_CLIP = 8.0


@dataclass
class RpnOutput:
    """Objectness logits (A) and box residuals (A×7), aligned with the anchor grid."""

    logits: Tensor
    residuals: Tensor


@dataclass(frozen=True)
class Proposal:
    box: Box3D
    score: float


class RpnHead(Module):
    """Two 1×1 convolutions: one logit and one 7-vector residual per anchor."""

    def __init__(self, store: ParamStore, cin: int, anchors_per_cell: int, rng: np.random.Generator, name: str = "rpn"):
        super().__init__(store, name)
        self.anchors_per_cell = anchors_per_cell
        prior = -math.log((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
        self.cls = Conv2d(store, f"{name}.cls", cin, anchors_per_cell, rng, kernel=1, activate=False, bias_init=prior)
        self.reg = Conv2d(store, f"{name}.reg", cin, anchors_per_cell * 7, rng, kernel=1, activate=False)

    def forward(self, tape: Tape, fused: BevMap) -> RpnOutput:
        h, w, _ = fused.shape
        logits = self.cls(tape, fused.features).reshape(h * w * self.anchors_per_cell)
        residuals = self.reg(tape, fused.features).reshape(h * w * self.anchors_per_cell, 7)
        return RpnOutput(logits, residuals)


def decode_proposals(
    out: RpnOutput,
    anchors: AnchorGrid,
    top_n: int,
    nms_iou: float,
) -> list[Proposal]:
    """
    Sigmoid scores, residual decoding, rotated BEV NMS, then the best ``top_n``.

    Raises:
        ValueError: If top_n < 1 or the output does not match the anchors
    """
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    if out.logits.shape[0] != len(anchors):
        raise ValueError(f"{out.logits.shape[0]} logits for {len(anchors)} anchors")
    scores = 1.0 / (1.0 + np.exp(-out.logits.value))
    residuals = np.clip(out.residuals.value, -RESIDUAL_CLIP, RESIDUAL_CLIP)
    boxes = decode_box_residual(residuals, anchors.boxes)
    keep = rotated_nms(boxes, scores, nms_iou, top_n)
    return [Proposal(Box3D.from_array(boxes[i], int(anchors.classes[i])), float(scores[i])) for i in keep]


def proposals_to_array(proposals: list[Proposal]) -> np.ndarray:
    if not proposals:
        return np.zeros((0, 7))
    return np.stack([p.box.as_array() for p in proposals])
