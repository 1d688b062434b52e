"""Toy-benchmark experiments: foreground retention under top-K sampling and the vote-scheme ablation."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from ssk.agg.semantic import VoteScheme
from ssk.geom.boxes import assign_points_to_boxes, point_centerness
from ssk.pcio.formats import Scene
from ssk.voxel.msv import DEFAULT_RATES, topk_count, topk_indices

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetentionResult:
    """Mean fraction of foreground points surviving every sampling stage."""

    centerness: float
    uniform: float
    num_scenes: int


def oracle_distance_weight(xyz: np.ndarray, scene: Scene) -> np.ndarray:
    """
    The weight a perfectly trained distance head converges to.

    Background is 0; foreground lies in [0.5, 1], rising with centerness.
    """
    owner = assign_points_to_boxes(xyz, scene.gt_boxes)
    mask = point_centerness(xyz, scene.gt_boxes, owner)
    return np.where(owner >= 0, 0.5 + 0.5 * mask, 0.0)


def _retained(foreground: np.ndarray, rows: np.ndarray) -> float:
    return float(foreground[rows].sum() / foreground.sum())


def sampling_retention(
    scenes: Sequence[Scene],
    rates: Sequence[float] = DEFAULT_RATES,
    seed: int = 0,
) -> RetentionResult:
    """
    Chain the sampling stages once by oracle weight (top-K) and once uniformly at random.

    Scenes without foreground points are skipped.
    """
    rng = np.random.default_rng(seed)
    by_weight, by_chance = [], []
    for scene in scenes:
        xyz = scene.cloud.xyz
        weights = oracle_distance_weight(xyz, scene)
        foreground = weights > 0
        if not foreground.any():
            continue
        top = np.arange(len(xyz))
        rand = np.arange(len(xyz))
        for rate in rates:
            top = top[topk_indices(weights[top], rate)]
            rand = np.sort(rng.choice(rand, size=topk_count(len(rand), rate), replace=False))
        by_weight.append(_retained(foreground, top))
        by_chance.append(_retained(foreground, rand))
    if not by_weight:
        raise ValueError("No scene has foreground points")
    result = RetentionResult(float(np.mean(by_weight)), float(np.mean(by_chance)), len(by_weight))
    logger.info(f"Foreground retention at rates {list(rates)}: top-K {result.centerness:.3f}, uniform {result.uniform:.3f}")
    return result


def run_scheme_ablation(
    config,
    scenes: Sequence[Scene],
    schemes: Sequence[VoteScheme | str] = tuple(VoteScheme),
    epochs: int | None = None,
) -> dict[str, float | None]:
    """
    Train and evaluate one detector per vote scheme on the same scenes and seed.

    Returns:
        Overall 3D mean AP per scheme name
    """
    # ssk.core.training imports this package
    from ssk.core.training import Trainer

    results: dict[str, float | None] = {}
    for scheme in schemes:
        scheme = VoteScheme.parse(scheme)
        cfg = replace(config, agg=replace(config.agg, scheme=scheme))
        if epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
        trainer = Trainer(cfg)
        trainer.fit(list(scenes))
        report = trainer.evaluate(list(scenes))
        results[scheme.value] = report.mean_ap()
        logger.info(f"Scheme {scheme.value}: mAP {results[scheme.value]}")
    return results
