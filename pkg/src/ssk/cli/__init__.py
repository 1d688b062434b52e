"""Command-line interface for ssk."""

import argparse
import sys
from importlib.metadata import version

from ssk.cli.commands import handle_eval, handle_export_ply, handle_forward, handle_synth, handle_train
from ssk.core.config import REPORT_FILE, setup_logging

EXPORT_STAGES = ("semantic_points", "pre_vote", "post_vote")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="ssk: two-stage voxel 3D object detection on desk-scale point clouds",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  ssk synth data/train --count 20
  ssk train data/train --out runs/toy --seed 0
  ssk eval data/val --checkpoint runs/toy/model.ckpt --scheme f
  ssk forward data/val/000003.bin --checkpoint runs/toy/model.ckpt
  ssk export-ply data/val/000003.bin post_vote --output layer.ply

        """
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {version('ssk')}"
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        help="Path to a key = value configuration file"
    )
    common.add_argument(
        "--seed",
        type=int,
        help="Override the configured seed"
    )
    common.add_argument(
        "--jobs",
        type=int,
        default=1,
        help="Scenes processed in parallel during inference"
    )
    common.add_argument(
        "--scheme",
        choices=["all", "v", "f", "none"],
        help="Vote scheme of the 3D feature layer"
    )
    common.add_argument(
        "--full-range",
        action="store_true",
        help="Use the full road-scale crop instead of the desk-scale one"
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")


    synth_parser = subparsers.add_parser(
        "synth",
        parents=[common],
        help="Generate synthetic labelled scenes"
    )
    synth_parser.add_argument(
        "out_dir",
        help="Directory receiving <id>.bin and <id>.txt pairs"
    )
    synth_parser.add_argument(
        "--count",
        type=int,
        default=20,
        help="Number of scenes"
    )
    synth_parser.add_argument(
        "--objects",
        type=int,
        default=4,
        help="Objects requested per scene"
    )


    forward_parser = subparsers.add_parser(
        "forward",
        parents=[common],
        help="Detect objects in point cloud files"
    )
    forward_parser.add_argument(
        "scenes",
        nargs="+",
        help="Point cloud .bin files"
    )
    forward_parser.add_argument(
        "--checkpoint",
        help="Trained weights; untrained weights are used when omitted"
    )
    forward_parser.add_argument(
        "--out-dir",
        help="Write <id>.txt detection files here"
    )


    train_parser = subparsers.add_parser(
        "train",
        parents=[common],
        help="Train on a directory of scenes"
    )
    train_parser.add_argument(
        "data_dir",
        help="Directory of .bin/.txt scene pairs"
    )
    train_parser.add_argument(
        "--out",
        default="runs/latest",
        help="Directory receiving the checkpoint, loss CSV and config"
    )
    train_parser.add_argument(
        "--epochs",
        type=int,
        help="Override the configured number of epochs"
    )
    train_parser.add_argument(
        "--gt-db",
        help="gt-sampling database directory (default: OUT/gt_database); reused when it holds samples"
    )


    eval_parser = subparsers.add_parser(
        "eval",
        parents=[common],
        help="Evaluate AP on a directory of scenes"
    )
    eval_parser.add_argument(
        "data_dir",
        help="Directory of .bin/.txt scene pairs"
    )
    eval_parser.add_argument(
        "--checkpoint",
        help="Trained weights"
    )
    eval_parser.add_argument(
        "--out",
        default=REPORT_FILE,
        help="Report path"
    )
    eval_parser.add_argument(
        "--pr-dir",
        help="Also write per-class precision-recall CSVs here"
    )
    eval_parser.add_argument(
        "--iou",
        choices=["3d", "bev"],
        default="3d",
        help="Overlap used for matching"
    )


    export_parser = subparsers.add_parser(
        "export-ply",
        parents=[common],
        help="Export the 3D feature layer of one scene as PLY"
    )
    export_parser.add_argument(
        "scene",
        help="Point cloud .bin file"
    )
    export_parser.add_argument(
        "stage",
        choices=EXPORT_STAGES,
        help="Which stage of the feature layer to write"
    )
    export_parser.add_argument(
        "--checkpoint",
        help="Trained weights"
    )
    export_parser.add_argument(
        "--output",
        help="PLY path (default: <scene id>_<stage>.ply)"
    )

    return parser


def main(argv: list[str] | None = None) -> int:
    """Main CLI entry point."""

    logger = setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    handlers = {
        "synth": handle_synth,
        "forward": handle_forward,
        "train": handle_train,
        "eval": handle_eval,
        "export-ply": handle_export_ply,
    }

    if args.command is None:
        parser.print_help()
        return 0

    try:
        return handlers[args.command](args)

    except KeyboardInterrupt:
        logger.info("Operation interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"Error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

__all__ = ["main"]
