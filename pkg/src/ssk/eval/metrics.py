"""Greedy detection matching, precision-recall curves and AP at 40 recall positions."""

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ssk.bev.rpn import Proposal
from ssk.geom.boxes import Box3D, boxes_to_array
from ssk.geom.iou import iou_matrix

RECALL_POSITIONS = 40
PR_HEADER = ("recall", "precision")


@dataclass(frozen=True)
class MatchResult:
    """Detections in descending score order with their TP flags, and which gts were claimed."""

    scores: np.ndarray
    tp: np.ndarray
    gt_matched: np.ndarray

    @property
    def num_gt(self) -> int:
        return len(self.gt_matched)


def match(dets: Sequence[Proposal], gts: Sequence[Box3D], iou_thr: float, iou_kind: str = "3d") -> MatchResult:
    """
    Greedy matching by descending score.

    Each detection takes its best-overlapping gt; it is a TP only when that
    overlap reaches ``iou_thr`` and the gt is still unclaimed.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    claimed = np.zeros(len(gts), dtype=bool)
    if len(dets) and len(gts):
        iou = iou_matrix(boxes_to_array([dets[i].box for i in order]), boxes_to_array(list(gts)), iou_kind)
        for row in range(len(order)):
            best = int(np.argmax(iou[row]))
            if iou[row, best] >= iou_thr and not claimed[best]:
                claimed[best] = True
                tp[row] = True
    return MatchResult(scores[order], tp, claimed)


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    num_gt: int

    @classmethod
    def from_matches(cls, results: Sequence[MatchResult]) -> "PrCurve":
        """Pool the matches of many scenes into one curve, ranking all detections by score."""
        num_gt = sum(r.num_gt for r in results)
        if not results:
            return cls(np.zeros(0), np.zeros(0), 0)
        scores = np.concatenate([r.scores for r in results])
        tp = np.concatenate([r.tp for r in results])
        order = np.argsort(-scores, kind="stable")
        hits = np.cumsum(tp[order])
        ranks = np.arange(1, len(order) + 1)
        recall = hits / num_gt if num_gt else np.zeros(len(order))
        return cls(recall.astype(np.float64), (hits / ranks).astype(np.float64), num_gt)

    def interpolated(self, positions: int = RECALL_POSITIONS) -> np.ndarray:
        """Max precision at recall ≥ k/positions for k = 1..positions; 0 where unreached."""
        targets = np.arange(1, positions + 1) / positions
        out = np.zeros(positions)
        if len(self.recall) == 0:
            return out
        # suffix max turns precision into the envelope over higher recalls
        envelope = np.maximum.accumulate(self.precision[::-1])[::-1]
        idx = np.searchsorted(self.recall, targets - 1e-12, side="left")
        reached = idx < len(self.recall)
        out[reached] = envelope[idx[reached]]
        return out


def ap_r40(curve: PrCurve) -> float | None:
    """AP over 40 recall positions; None when there is no gt."""
    if curve.num_gt == 0:
        return None
    return float(np.mean(curve.interpolated(RECALL_POSITIONS)))


def export_pr(curve: PrCurve, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PR_HEADER)
        for r, p in zip(curve.recall, curve.precision, strict=True):
            writer.writerow((repr(float(r)), repr(float(p))))


def read_pr(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != PR_HEADER:
        raise ValueError(f"{path}: not a precision-recall CSV")
    values = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64).reshape(-1, 2)
    return values[:, 0], values[:, 1]


def proposal_recall(
    proposals: Sequence[Sequence[Proposal]],
    gts: Sequence[Sequence[Box3D]],
    iou_thr: float = 0.5,
) -> float | None:
    """Fraction of gt boxes overlapped by any proposal at BEV IoU ≥ iou_thr."""
    total = hit = 0
    for props, boxes in zip(proposals, gts, strict=True):
        total += len(boxes)
        if not props or not boxes:
            continue
        iou = iou_matrix(boxes_to_array(list(boxes)), boxes_to_array([p.box for p in props]), "bev")
        hit += int(np.sum(iou.max(axis=1) >= iou_thr))
    return hit / total if total else None
