"""CLI command handlers for ssk."""

import dataclasses
import logging
from pathlib import Path

from ssk.agg.semantic import VoteScheme, export_semantic_ply
from ssk.core.config import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    GT_DATABASE_DIR,
    LOSS_CSV,
    PipelineConfig,
    load_config,
    save_config,
)
from ssk.core.pipeline import Detector
from ssk.core.training import Trainer
from ssk.nn.autograd import Tape
from ssk.pcio.formats import list_scenes, load_scene, save_scene, write_detections
from ssk.pcio.synth import synth_scene


def build_config(args) -> PipelineConfig:
    """Config file (or defaults) with the command-line overrides applied."""
    config = load_config(args.config, full_range=args.full_range)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.scheme is not None:
        config = dataclasses.replace(config, agg=dataclasses.replace(config.agg, scheme=VoteScheme.parse(args.scheme)))
    return config


def _detector(config: PipelineConfig, checkpoint: str | None) -> Detector:
    logger = logging.getLogger("ssk")
    if checkpoint is None:
        logger.warning("No checkpoint given, running with untrained weights")
        return Detector(config)
    return Detector.from_checkpoint(config, checkpoint)


def _load_dir(data_dir: str):
    paths = list_scenes(data_dir)
    if not paths:
        raise FileNotFoundError(f"No scenes in {data_dir}")
    return [load_scene(p) for p in paths]


def handle_synth(args) -> int:
    """Handle synth command."""
    logger = logging.getLogger("ssk")
    config = build_config(args)
    if args.count < 1:
        logger.error(f"--count must be positive, got {args.count}")
        return 1

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        scene = synth_scene(config.seed + i, config.voxel, args.objects)
        save_scene(scene, out_dir)
        logger.debug(f"Scene {scene.id}: {len(scene.cloud)} points, {len(scene.gt_boxes)} boxes")

    logger.info(f"Wrote {args.count} scenes to {out_dir}")
    return 0


def handle_forward(args) -> int:
    """Handle forward command."""
    logger = logging.getLogger("ssk")
    config = build_config(args)
    scenes = []
    for path in args.scenes:
        if not Path(path).is_file():
            logger.error(f"Point cloud not found: {path}")
            return 1
        scenes.append(load_scene(path))

    trainer = Trainer(config, _detector(config, args.checkpoint))
    results = trainer.detect(scenes, args.jobs)

    for result in results:
        if args.out_dir:
            write_detections(result.detections, Path(args.out_dir) / f"{result.scene_id}.txt")
        print(f"{result.scene_id}\t{len(result.detections)}\t{result.total_time:.4f}")
    return 0


def handle_train(args) -> int:
    """Handle train command."""
    logger = logging.getLogger("ssk")
    config = build_config(args)
    if args.epochs is not None:
        config = dataclasses.replace(config, train=dataclasses.replace(config.train, epochs=args.epochs))

    scenes = _load_dir(args.data_dir)
    out = Path(args.out)
    save_config(config, out / CONFIG_FILE)

    logger.info(f"Training on {len(scenes)} scenes for {config.train.epochs} epochs")
    trainer = Trainer(config)
    gt_database = Path(args.gt_db) if args.gt_db else out / GT_DATABASE_DIR
    history = trainer.fit(scenes, out / LOSS_CSV, gt_database)
    trainer.save_checkpoint(out / CHECKPOINT_FILE)

    if history:
        logger.info(f"Loss {history[0]['total']:.4f} -> {history[-1]['total']:.4f}")
    logger.info(f"Run written to {out}")
    return 0


def handle_eval(args) -> int:
    """Handle eval command."""
    logger = logging.getLogger("ssk")
    config = build_config(args)
    scenes = _load_dir(args.data_dir)

    trainer = Trainer(config, _detector(config, args.checkpoint))
    report = trainer.evaluate(scenes, args.iou, args.jobs)
    report.write(args.out, args.pr_dir)

    print(report.to_json())
    logger.info(f"Overall mAP: {report.mean_ap()}")
    return 0


def handle_export_ply(args) -> int:
    """Handle export-ply command."""
    logger = logging.getLogger("ssk")
    config = build_config(args)
    if not Path(args.scene).is_file():
        logger.error(f"Point cloud not found: {args.scene}")
        return 1
    scene = load_scene(args.scene)

    detector = _detector(config, args.checkpoint)
    out = detector.forward(Tape(training=False, grad=False), scene, training=False)
    if out is None:
        logger.error(f"Scene {scene.id} has no points inside the range")
        return 1

    output = Path(args.output) if args.output else Path(f"{scene.id}_{args.stage}.ply")
    export_semantic_ply(output, args.stage, out.semantic, out.layer)
    return 0
