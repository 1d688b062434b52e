"""Per-class, per-range AP report over a set of scenes."""

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from ssk.bev.rpn import Proposal
from ssk.eval.metrics import MatchResult, PrCurve, ap_r40, export_pr, match
from ssk.geom.boxes import CLASS_NAMES, Box3D

logger = logging.getLogger(__name__)

# IoU needed for a true positive, per class id
IOU_THRESHOLDS = (0.7, 0.5, 0.5)
# (name, lower, upper) in meters of BEV distance from the sensor
RANGE_BUCKETS: tuple[tuple[str, float, float], ...] = (
    ("overall", 0.0, math.inf),
    ("0-30m", 0.0, 30.0),
    ("30-50m", 30.0, 50.0),
    ("50m-inf", 50.0, math.inf),
)


def bev_range(box: Box3D) -> float:
    return math.hypot(box.center[0], box.center[1])


def _in_bucket(box: Box3D, lower: float, upper: float) -> bool:
    return lower <= bev_range(box) < upper


@dataclass
class EvalReport:
    """AP (None when a cell has no gt) keyed by class name, then range bucket."""

    ap: dict[str, dict[str, float | None]]
    iou_kind: str
    num_scenes: int
    curves: dict[str, PrCurve] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"iou_kind": self.iou_kind, "num_scenes": self.num_scenes, "ap_r40": self.ap}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def mean_ap(self, bucket: str = "overall") -> float | None:
        values = [v[bucket] for v in self.ap.values() if v.get(bucket) is not None]
        return sum(values) / len(values) if values else None

    def write(self, path: Path | str, pr_dir: Path | str | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        if pr_dir is not None:
            for name, curve in self.curves.items():
                export_pr(curve, Path(pr_dir) / f"pr_{name}.csv")
        logger.info(f"Wrote evaluation report to {path}")


def evaluate(
    detections: Sequence[Sequence[Proposal]],
    gts: Sequence[Sequence[Box3D]],
    iou_kind: str = "3d",
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> EvalReport:
    """
    Match every scene independently, then pool per class and range bucket.

    Detections and gts are bucketed by their own BEV range.
    """
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} scenes")
    ap: dict[str, dict[str, float | None]] = {}
    curves: dict[str, PrCurve] = {}
    for class_id, class_name in enumerate(CLASS_NAMES):
        ap[class_name] = {}
        for bucket, lower, upper in RANGE_BUCKETS:
            results: list[MatchResult] = []
            for dets, boxes in zip(detections, gts, strict=True):
                d = [p for p in dets if p.box.class_id == class_id and _in_bucket(p.box, lower, upper)]
                g = [b for b in boxes if b.class_id == class_id and _in_bucket(b, lower, upper)]
                results.append(match(d, g, iou_thresholds[class_id], iou_kind))
            curve = PrCurve.from_matches(results)
            ap[class_name][bucket] = ap_r40(curve)
            if bucket == "overall":
                curves[class_name] = curve
    return EvalReport(ap, iou_kind, len(gts), curves)
