"""Sequential, seeded training loop with one-cycle AdamW and per-step loss logging."""

import csv
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ssk.core.config import PipelineConfig
from ssk.core.pipeline import DetectionResult, Detector
from ssk.eval.metrics import proposal_recall
from ssk.eval.report import EvalReport, evaluate
from ssk.loss.objectives import LossBreakdown
from ssk.nn.autograd import Tape
from ssk.nn.optim import adam_step, one_cycle_lr
from ssk.pcio.augment import GtLibrary, augment
from ssk.pcio.formats import Scene, crop_scene, list_scenes

LOSS_COLUMNS = ("step", "epoch", "scene", "lr", "rpn", "head", "vote_v", "vote_f", "vote", "ctr", "total")


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


class Trainer:
    """
    Trains one Detector scene by scene.

    Scene order, augmentation and initialization all derive from
    ``config.seed``, so equal seeds give bit-identical runs.
    """

    def __init__(self, config: PipelineConfig, detector: Detector | None = None):
        self.config = config
        self.detector = detector or Detector(config)
        self.logger = logging.getLogger("ssk")
        self.history: list[dict[str, object]] = []

    def _prepare(self, scene: Scene, epoch: int, index: int, library: GtLibrary | None) -> Scene:
        if not self.config.train.augment:
            return scene
        seed = int(np.random.SeedSequence([self.config.seed, epoch, index]).generate_state(1)[0])
        return augment(scene, seed, self.config.augment, library)

    def train_step(self, scene: Scene, lr: float) -> LossBreakdown | None:
        """One forward/backward/update on one scene; None for scenes empty after cropping."""
        tape = Tape(training=True)
        out = self.detector.forward(tape, scene, training=True)
        if out is None:
            return None
        losses = self.detector.compute_losses(out)
        tape.backward(losses.tensor)
        train = self.config.train
        adam_step(
            self.detector.store,
            tape.param_grads(),
            lr,
            betas=(train.beta1, train.beta2),
            weight_decay=train.weight_decay,
        )
        self.detector.store.update_buffers(tape.buffer_updates)
        tape.free()
        return losses

    def _gt_library(self, scenes: Sequence[Scene], gt_database: Path | str | None) -> GtLibrary | None:
        if not self.config.train.gt_sampling:
            return None
        if gt_database is not None and Path(gt_database).is_dir() and list_scenes(gt_database):
            return GtLibrary.load(gt_database)
        library = GtLibrary.from_scenes(list(scenes))
        if gt_database is not None:
            library.save(gt_database)
        return library

    def fit(
        self,
        scenes: Sequence[Scene],
        loss_csv: Path | str | None = None,
        gt_database: Path | str | None = None,
    ) -> list[dict[str, object]]:
        """
        Run every epoch over ``scenes``.

        Args:
            scenes: Training scenes, uncropped
            loss_csv: Optional CSV receiving one row per step
            gt_database: gt-sampling database directory; loaded when it holds
                samples, otherwise built from ``scenes`` and written there

        Returns:
            The loss rows, also kept in ``self.history``
        """
        if not scenes:
            raise ValueError("No training scenes")
        train = self.config.train
        library = self._gt_library(scenes, gt_database)
        total = train.epochs * len(scenes)
        writer = handle = None
        if loss_csv is not None:
            path = Path(loss_csv)
            path.parent.mkdir(parents=True, exist_ok=True)
            handle = open(path, "w", newline="")
            writer = csv.writer(handle)
            writer.writerow(LOSS_COLUMNS)

        step = 0
        try:
            for epoch in range(train.epochs):
                order = np.random.default_rng([self.config.seed, epoch]).permutation(len(scenes))
                for index in order:
                    lr = one_cycle_lr(step, total, train.lr_max)
                    scene = self._prepare(scenes[index], epoch, int(index), library)
                    losses = self.train_step(scene, lr)
                    step += 1
                    if losses is None:
                        self.logger.warning(f"Skipping scene {scenes[index].id}: no points inside the range")
                        continue
                    row = {"step": step, "epoch": epoch, "scene": scenes[index].id, "lr": lr, **losses.as_row()}
                    self.history.append(row)
                    if writer is not None:
                        writer.writerow([_format(row[c]) for c in LOSS_COLUMNS])
                if self.history:
                    self.logger.info(f"Epoch {epoch + 1}/{train.epochs}: loss {self.history[-1]['total']:.4f}")
        finally:
            if handle is not None:
                handle.close()
        return self.history

    def detect(self, scenes: Sequence[Scene], jobs: int = 1) -> list[DetectionResult]:
        """Inference over scenes; results keep the input order for any ``jobs``."""
        if jobs <= 1:
            return [self.detector.detect(s) for s in scenes]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(self.detector.detect, scenes))

    def evaluate(self, scenes: Sequence[Scene], iou_kind: str = "3d", jobs: int = 1) -> EvalReport:
        results = self.detect(scenes, jobs)
        gts = [crop_scene(s, self.config.voxel).gt_boxes for s in scenes]
        report = evaluate([r.detections for r in results], gts, iou_kind)
        self.logger.info(f"Evaluated {len(scenes)} scenes: mAP {report.mean_ap()}")
        return report

    def proposal_recall(self, scenes: Sequence[Scene], iou_thr: float = 0.5) -> float | None:
        """RPN recall on scenes at BEV IoU ``iou_thr``."""
        proposals, gts = [], []
        for scene in scenes:
            out = self.detector.forward(Tape(training=False, grad=False), scene, training=False)
            proposals.append([] if out is None else out.proposals)
            gts.append(crop_scene(scene, self.config.voxel).gt_boxes)
        return proposal_recall(proposals, gts, iou_thr)

    def save_checkpoint(self, path: Path | str) -> None:
        self.detector.store.save(Path(path))
