"""End-to-end two-stage detector: proposals from the BEV branch, refinement on the 3D feature layer."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ssk.agg.head import HeadOutput, HeadTargets, RefinementHead, assign_head_targets, final_decode, sample_proposals
from ssk.agg.roi_pool import HvRoiPool
from ssk.agg.semantic import (
    FeatureLayer3D,
    SemanticPointCloud,
    SemanticProjector,
    SemanticVoxels,
    build_semantic_points,
    masked_center_vote,
    semantic_voxelize,
)
from ssk.bev.anchors import assign_rpn_targets, generate_anchors
from ssk.bev.encoder2d import Encoder2D, bev_channels, to_bev
from ssk.bev.rpn import Proposal, RpnHead, RpnOutput, decode_proposals
from ssk.core.config import PipelineConfig
from ssk.geom.boxes import Box3D, assign_points_to_boxes, point_centerness
from ssk.loss.objectives import LossBreakdown, VoteSupervision, l_ctr, l_head, l_rpn, l_total, l_vote_f, l_vote_v
from ssk.nn.autograd import Tape
from ssk.nn.base import Linear
from ssk.nn.params import ParamStore
from ssk.pcio.formats import Scene, crop_scene
from ssk.sparse3d.encoder import Encoder3D
from ssk.voxel.msv import MsvOutput, MultiScaleVoxelEncoder, SparseVoxelTensor


@dataclass
class ForwardOutput:
    """Everything one pass over a (cropped) scene produced."""

    scene: Scene
    msv: MsvOutput
    features3d: list[SparseVoxelTensor]
    rpn: RpnOutput
    proposals: list[Proposal]
    semantic: SemanticPointCloud
    voxels: SemanticVoxels
    layer: FeatureLayer3D
    pooled_proposals: list[Proposal]
    head: HeadOutput
    head_targets: HeadTargets | None = None
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class DetectionResult:
    scene_id: str
    detections: list[Proposal]
    timings: dict[str, float]

    @property
    def total_time(self) -> float:
        return sum(self.timings.values())


def _centroids(points: np.ndarray, boxes: list[Box3D]) -> tuple[np.ndarray, np.ndarray]:
    """Foreground flag and owning box center per point (zeros for background)."""
    owner = assign_points_to_boxes(points, boxes)
    centers = np.zeros((len(points), 3))
    fg = owner >= 0
    if fg.any():
        centers[fg] = np.array([boxes[i].center for i in owner[fg]])
    return fg, centers


class Detector:
    """Owns every learnable module of the pipeline in one ParamStore."""

    def __init__(self, config: PipelineConfig, store: ParamStore | None = None):
        self.config = config
        self.logger = logging.getLogger("ssk")
        self.store = ParamStore() if store is None else store
        rng = np.random.default_rng(config.seed)

        self.msv = MultiScaleVoxelEncoder(
            self.store, config.voxel, rng, config.msv.channels, config.msv.rates, vote=config.msv.vote
        )
        self.enc3d = Encoder3D(self.store, self.msv.out_channels, rng, config.encoder)
        self.f_specs = self.enc3d.output_specs(self.msv.specs)
        bev_in = [bev_channels(c, s) for c, s in zip(self.enc3d.out_channels, self.f_specs, strict=True)]
        self.enc2d = Encoder2D(self.store, bev_in, rng, config.bev_widths)
        self.anchors = generate_anchors(self.f_specs[-1], config.anchors)
        self.rpn = RpnHead(self.store, self.enc2d.out_channels, config.anchors.per_cell, rng)

        width = config.agg.semantic_width
        self.projector = SemanticProjector(self.store, self.msv.out_channels, self.enc3d.out_channels, width, rng)
        self.agg_vote = Linear(self.store, "agg.vote", width, 3, rng)
        self.pool = HvRoiPool(self.store, width, min(config.voxel.voxel_size), rng, config.pool)
        self.head = RefinementHead(self.store, self.pool.out_dim, rng, config.head.hidden)
        self.logger.debug(f"Detector with {self.store.num_parameters()} parameters, {len(self.anchors)} anchors")

    @classmethod
    def from_checkpoint(cls, config: PipelineConfig, path: Path | str) -> "Detector":
        detector = cls(config)
        detector.store.load(Path(path))
        return detector

    def forward(self, tape: Tape, scene: Scene, training: bool = False) -> ForwardOutput | None:
        """
        Run both stages on one scene; None when nothing is left after cropping.

        On training passes the head sees a sample of the proposals chosen by
        IoU with the gt; otherwise it sees all of them.
        """
        cfg = self.config
        scene = crop_scene(scene, cfg.voxel)
        if len(scene.cloud) == 0:
            return None
        timings: dict[str, float] = {}
        clock = time.perf_counter()

        def lap(stage: str) -> None:
            nonlocal clock
            now = time.perf_counter()
            timings[stage] = now - clock
            clock = now

        msv = self.msv(tape, scene.cloud.xyz, scene.cloud.reflectance)
        lap("msv")
        features3d = self.enc3d(tape, msv.voxels)
        lap("encoder3d")
        fused = self.enc2d(tape, [to_bev(f) for f in features3d])
        rpn = self.rpn(tape, fused)
        top_n = cfg.detect.top_n_train if training else cfg.detect.top_n_eval
        proposals = decode_proposals(rpn, self.anchors, top_n, cfg.detect.nms_iou)
        lap("rpn")

        v_branches = [(p.coords, p.features) for p in msv.points[:-1]]
        v_branches.append((msv.last_level_coords(), msv.points[-1].features))
        semantic = build_semantic_points(tape, v_branches, features3d, self.projector)
        voxels = semantic_voxelize(semantic, cfg.voxel)
        layer = masked_center_vote(tape, voxels, cfg.agg.scheme, self.agg_vote)
        lap("feature_layer")

        targets = None
        chosen = proposals
        if training:
            all_targets = assign_head_targets(proposals, scene.gt_boxes, cfg.head)
            rows = sample_proposals(all_targets.iou, cfg.head)
            chosen = [proposals[i] for i in rows]
            targets = HeadTargets(
                all_targets.iou[rows], all_targets.confidence[rows], all_targets.residuals[rows], all_targets.regress[rows]
            )
        pooled = self.pool(tape, layer, [p.box for p in chosen])
        head = self.head(tape, pooled)
        lap("head")
        self.logger.debug(
            f"Scene {scene.id}: {len(scene.cloud)} points, {len(proposals)} proposals, {len(layer)} layer voxels"
        )
        return ForwardOutput(scene, msv, features3d, rpn, proposals, semantic, voxels, layer, chosen, head, targets, timings)

    def compute_losses(self, out: ForwardOutput) -> LossBreakdown:
        """All training objectives of one training pass."""
        cfg = self.config
        gt = out.scene.gt_boxes
        tape = out.head.logits.tape

        if cfg.msv.centerness:
            parts = []
            for level in out.msv.points:
                owner = assign_points_to_boxes(level.coords, gt)
                mask = point_centerness(level.coords, gt, owner)
                parts.append(l_ctr(level.weights, mask, owner >= 0))
            ctr = sum(parts[1:], parts[0])
        else:
            ctr = tape.constant(0.0)

        if out.msv.voted_coords is not None:
            fg, centers = _centroids(out.msv.pre_vote_coords, gt)
            vote_v = l_vote_v(VoteSupervision(out.msv.voted_coords, centers, fg), cfg.loss.vote_norm)
        else:
            vote_v = tape.constant(0.0)

        fg, centers = _centroids(out.layer.pre_vote_centers, gt)
        vote_f = l_vote_f(VoteSupervision(out.layer.centers, centers, fg, out.layer.voted), cfg.loss.vote_norm)

        rpn_targets = assign_rpn_targets(self.anchors, gt)
        rpn = l_rpn(out.rpn.logits, out.rpn.residuals, rpn_targets.labels, rpn_targets.residuals, cfg.loss)

        if out.head_targets is None:
            raise ValueError("Head losses need a training forward pass")
        t = out.head_targets
        head = l_head(out.head.logits, t.confidence, out.head.residuals, t.residuals, t.regress, len(t.iou), cfg.loss)
        return l_total(rpn, head, vote_v, vote_f, ctr, cfg.loss)

    def detect(self, scene: Scene) -> DetectionResult:
        """Inference on one scene without recording gradients."""
        start = time.perf_counter()
        tape = Tape(training=False, grad=False)
        out = self.forward(tape, scene, training=False)
        if out is None:
            return DetectionResult(scene.id, [], {"total": time.perf_counter() - start})
        clock = time.perf_counter()
        detections = final_decode(
            out.pooled_proposals, out.head, self.config.detect.final_nms_iou, self.config.detect.score_threshold
        )
        timings = dict(out.timings)
        timings["decode"] = time.perf_counter() - clock
        return DetectionResult(scene.id, detections, timings)
