import csv
from dataclasses import replace

import numpy as np
import pytest

from ssk.agg.semantic import VoteScheme
from ssk.core.config import DESK_SPEC, tiny_config
from ssk.core.pipeline import Detector
from ssk.core.training import LOSS_COLUMNS, Trainer
from ssk.eval.experiments import run_scheme_ablation
from ssk.geom.boxes import assign_points_to_boxes, point_centerness
from ssk.loss.objectives import l_ctr
from ssk.nn.autograd import Tape
from ssk.pcio.augment import GtLibrary
from ssk.pcio.formats import PointCloud, Scene
from ssk.pcio.synth import synth_scene


def no_augment(config, epochs=None):
    train = replace(config.train, augment=False, gt_sampling=False)
    if epochs is not None:
        train = replace(train, epochs=epochs)
    return replace(config, train=train)


class TestDetectorForward:
    def test_inference_pass(self, config, scene, eval_tape):
        detector = Detector(config)
        out = detector.forward(eval_tape, scene)
        assert out is not None
        assert len(out.features3d) == 4
        assert 0 < len(out.proposals) <= config.detect.top_n_eval
        assert out.pooled_proposals == out.proposals
        assert out.head.logits.shape == (len(out.proposals),)
        assert out.head_targets is None
        assert set(out.timings) == {"msv", "encoder3d", "rpn", "feature_layer", "head"}

    def test_training_pass_samples_proposals(self, config, scene, tape):
        out = Detector(config).forward(tape, scene, training=True)
        assert out.head_targets is not None
        assert 0 < len(out.pooled_proposals) <= config.head.num_samples
        assert len(out.head_targets.iou) == len(out.pooled_proposals)

    def test_same_seed_same_weights(self, config):
        a, b = Detector(config).store, Detector(config).store
        assert a.values.keys() == b.values.keys()
        assert all(np.array_equal(a.values[k], b.values[k]) for k in a.values)

    def test_empty_scene_has_no_detections(self, config):
        result = Detector(config).detect(Scene(PointCloud.empty(), [], "empty"))
        assert result.scene_id == "empty"
        assert result.detections == []

    def test_scene_outside_range_has_no_detections(self, config):
        far = PointCloud(np.array([[100.0, 0.0, 0.0]]), np.array([0.5]))
        assert Detector(config).detect(Scene(far, [], "far")).detections == []

    def test_compute_losses_needs_training_pass(self, config, scene, eval_tape):
        detector = Detector(config)
        with pytest.raises(ValueError):
            detector.compute_losses(detector.forward(eval_tape, scene))


class TestLosses:
    def test_total_is_weighted_sum(self, config, scene, tape):
        detector = Detector(config)
        losses = detector.compute_losses(detector.forward(tape, scene, training=True))
        weights = config.loss
        expected = losses.rpn + losses.head + weights.alpha * (losses.vote_v + losses.vote_f) + weights.beta * losses.ctr
        assert losses.total == pytest.approx(expected)
        assert all(np.isfinite(v) and v >= 0.0 for v in losses.as_row().values())

    def test_gradients_reach_parameters(self, config, scene, tape):
        detector = Detector(config)
        losses = detector.compute_losses(detector.forward(tape, scene, training=True))
        tape.backward(losses.tensor)
        grads = tape.param_grads()
        assert set(grads) <= set(detector.store.trainable_names())
        assert all(np.all(np.isfinite(g)) for g in grads.values())
        assert np.any(grads["rpn.cls.bias"] != 0.0)
        assert np.any(grads["head.conf.bias"] != 0.0)

    def test_no_vote_anywhere(self, config, scene, tape):
        config = replace(
            config,
            msv=replace(config.msv, vote=False),
            agg=replace(config.agg, scheme=VoteScheme.NONE),
        )
        detector = Detector(config)
        out = detector.forward(tape, scene, training=True)
        assert out.msv.voted_coords is None
        assert not out.layer.voted.any()
        np.testing.assert_array_equal(out.layer.centers.value, out.layer.pre_vote_centers)
        losses = detector.compute_losses(out)
        assert losses.vote_v == 0.0
        assert losses.vote_f == 0.0

    def test_centerness_loss_sums_levels(self, config, scene, tape):
        detector = Detector(config)
        out = detector.forward(tape, scene, training=True)
        per_level = []
        for level in out.msv.points:
            owner = assign_points_to_boxes(level.coords, scene.gt_boxes)
            mask = point_centerness(level.coords, scene.gt_boxes, owner)
            per_level.append(float(l_ctr(level.weights, mask, owner >= 0).value))
        assert len(per_level) == 4
        assert detector.compute_losses(out).ctr == pytest.approx(sum(per_level))

    def test_centerness_loss_can_be_switched_off(self, config, scene, tape):
        config = replace(config, msv=replace(config.msv, centerness=False))
        detector = Detector(config)
        assert detector.compute_losses(detector.forward(tape, scene, training=True)).ctr == 0.0


class TestCheckpoint:
    def test_round_trip_reproduces_detections(self, tmp_path, config, scene):
        trainer = Trainer(no_augment(config, epochs=1))
        trainer.fit([scene])
        trainer.save_checkpoint(tmp_path / "model.ckpt")

        restored = Detector.from_checkpoint(config, tmp_path / "model.ckpt")
        before = trainer.detector.detect(scene).detections
        after = restored.detect(scene).detections
        assert len(before) == len(after)
        for a, b in zip(before, after, strict=True):
            np.testing.assert_array_equal(a.box.as_array(), b.box.as_array())
            assert a.score == b.score


class TestTrainer:
    def test_fit_writes_loss_csv(self, tmp_path, config, toy_scenes):
        trainer = Trainer(replace(config, train=replace(config.train, epochs=1)))
        history = trainer.fit(toy_scenes[:2], tmp_path / "run" / "loss.csv")
        assert len(history) == 2
        with open(tmp_path / "run" / "loss.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOSS_COLUMNS
        assert len(rows) == 3
        assert {rows[1][2], rows[2][2]} == {toy_scenes[0].id, toy_scenes[1].id}
        assert float(rows[1][LOSS_COLUMNS.index("total")]) == history[0]["total"]

    def test_fit_writes_then_reuses_gt_database(self, tmp_path, config, toy_scenes, monkeypatch):
        config = replace(config, train=replace(config.train, epochs=1, augment=True, gt_sampling=True))
        database = tmp_path / "gt_database"
        Trainer(config).fit(toy_scenes[:1], gt_database=database)
        written = sorted(p.name for p in database.iterdir())
        assert len(written) == 2 * len(toy_scenes[0].gt_boxes)

        def rebuild(*_):
            raise AssertionError("database should have been loaded")

        monkeypatch.setattr(GtLibrary, "from_scenes", classmethod(rebuild))
        assert Trainer(config).fit(toy_scenes[1:2], gt_database=database)
        assert sorted(p.name for p in database.iterdir()) == written

    def test_fit_needs_scenes(self, config):
        with pytest.raises(ValueError):
            Trainer(config).fit([])

    def test_weights_change_after_a_step(self, config, scene):
        trainer = Trainer(config)
        before = trainer.detector.store.get("rpn.cls.bias").copy()
        assert trainer.train_step(scene, lr=0.003) is not None
        assert not np.array_equal(before, trainer.detector.store.get("rpn.cls.bias"))

    def test_parallel_detect_keeps_order(self, config, toy_scenes):
        trainer = Trainer(config)
        serial = trainer.detect(toy_scenes, jobs=1)
        parallel = trainer.detect(toy_scenes, jobs=2)
        assert [r.scene_id for r in parallel] == [s.id for s in toy_scenes]
        for a, b in zip(serial, parallel, strict=True):
            assert [d.score for d in a.detections] == [d.score for d in b.detections]

    def test_evaluate_and_proposal_recall(self, config, toy_scenes):
        trainer = Trainer(config)
        report = trainer.evaluate(toy_scenes[:2])
        assert report.num_scenes == 2
        assert set(report.ap) == {"car", "pedestrian", "cyclist"}
        recall = trainer.proposal_recall(toy_scenes[:2])
        assert recall is None or 0.0 <= recall <= 1.0

    def test_seeded_runs_are_identical(self, config, toy_scenes):
        a = Trainer(config).fit(toy_scenes[:2])
        b = Trainer(config).fit(toy_scenes[:2])
        assert a == b


OVERFIT_SCENES = 20
OVERFIT_EPOCHS = 60


def voted_distances(detector: Detector, scenes) -> tuple[float, float]:
    """Mean distance of foreground voted F-voxels to their gt center, before and after the vote."""
    before, after = [], []
    for scene in scenes:
        out = detector.forward(Tape(training=False, grad=False), scene)
        if out is None:
            continue
        layer = out.layer
        owner = assign_points_to_boxes(layer.pre_vote_centers, scene.gt_boxes)
        rows = np.nonzero(layer.voted & (owner >= 0))[0]
        centers = np.array([scene.gt_boxes[i].center for i in owner[rows]]).reshape(-1, 3)
        before.append(np.linalg.norm(layer.pre_vote_centers[rows] - centers, axis=1))
        after.append(np.linalg.norm(layer.centers.value[rows] - centers, axis=1))
    return float(np.mean(np.concatenate(before))), float(np.mean(np.concatenate(after)))


@pytest.fixture(scope="module")
def overfit_scenes():
    return [synth_scene(seed, DESK_SPEC, 3) for seed in range(OVERFIT_SCENES)]


@pytest.fixture(scope="module")
def overfit_run(overfit_scenes):
    trainer = Trainer(no_augment(tiny_config(seed=0), epochs=OVERFIT_EPOCHS))
    history = trainer.fit(overfit_scenes)
    return trainer, history


@pytest.mark.slow
class TestEndToEnd:
    def test_loss_drops_below_a_fifth(self, overfit_run):
        _, history = overfit_run
        assert len(history) == OVERFIT_SCENES * OVERFIT_EPOCHS
        first = np.mean([row["total"] for row in history[:OVERFIT_SCENES]])
        last = np.mean([row["total"] for row in history[-OVERFIT_SCENES:]])
        assert last < 0.2 * first

    def test_proposals_recall_training_objects(self, overfit_run, overfit_scenes):
        trainer, _ = overfit_run
        recall = trainer.proposal_recall(overfit_scenes, iou_thr=0.5)
        assert recall is not None and recall >= 0.9

    def test_vote_moves_feature_voxels_toward_centers(self, overfit_run, overfit_scenes):
        trainer, _ = overfit_run
        before, after = voted_distances(trainer.detector, overfit_scenes)
        assert after < before

    def test_f_only_scheme_leads_ablation(self, config, overfit_scenes):
        results = run_scheme_ablation(no_augment(config), overfit_scenes[:8], list(VoteScheme), epochs=20)
        assert set(results) == {s.value for s in VoteScheme}
        scores = {name: (value or 0.0) for name, value in results.items()}
        assert scores["f_only"] >= scores["all"]
        assert scores["f_only"] >= scores["none"]

    def test_same_seed_gives_identical_files(self, tmp_path, config, toy_scenes):
        config = replace(config, train=replace(config.train, epochs=2, augment=True))
        for name in ("a", "b"):
            trainer = Trainer(config)
            trainer.fit(toy_scenes[:2], tmp_path / name / "loss.csv")
            trainer.save_checkpoint(tmp_path / name / "model.ckpt")
        for file in ("loss.csv", "model.ckpt"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()
