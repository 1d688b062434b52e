import json

import numpy as np
import pytest

from ssk.bev.rpn import Proposal
from ssk.core.config import DESK_SPEC
from ssk.eval.experiments import oracle_distance_weight, sampling_retention
from ssk.eval.metrics import PrCurve, ap_r40, export_pr, match, proposal_recall, read_pr
from ssk.eval.report import RANGE_BUCKETS, evaluate
from ssk.geom.boxes import Box3D
from ssk.pcio.synth import synth_scene

CAR = (3.9, 1.6, 1.56)


def car(x, y=0.0, class_id=0):
    return Box3D((x, y, -1.0), CAR, 0.0, class_id)


class TestMatching:
    def test_duplicates_are_false_positives(self):
        gt = [car(5.0)]
        result = match([Proposal(car(5.0), 0.6), Proposal(car(5.0), 0.9)], gt, 0.7)
        np.testing.assert_array_equal(result.scores, [0.9, 0.6])
        np.testing.assert_array_equal(result.tp, [True, False])
        assert result.gt_matched.all()

    def test_below_threshold(self):
        result = match([Proposal(car(5.5), 0.9)], [car(5.0)], 0.7)
        assert not result.tp.any()

    def test_no_gt_gives_no_ap(self):
        curve = PrCurve.from_matches([match([Proposal(car(5.0), 0.9)], [], 0.7)])
        assert ap_r40(curve) is None


class TestAp:
    def test_hand_computed_curve(self):
        gts = [car(10.0 * i) for i in range(3)]
        dets = [
            Proposal(car(0.0), 0.9),
            Proposal(car(50.0), 0.8),
            Proposal(car(10.0), 0.7),
            Proposal(car(60.0), 0.6),
            Proposal(car(20.0), 0.5),
        ]
        curve = PrCurve.from_matches([match(dets, gts, 0.7)])
        np.testing.assert_allclose(curve.recall, [1 / 3, 1 / 3, 2 / 3, 2 / 3, 1.0])
        np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3, 0.5, 0.6])
        expected = (13 * 1.0 + 13 * (2 / 3) + 14 * 0.6) / 40
        assert ap_r40(curve) == pytest.approx(expected)

    def test_perfect_detector(self):
        gts = [car(10.0 * i) for i in range(4)]
        curve = PrCurve.from_matches([match([Proposal(b, 0.9) for b in gts], gts, 0.7)])
        assert ap_r40(curve) == pytest.approx(1.0)

    def test_adding_a_true_positive_never_lowers_ap(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            gts = [car(10.0 * i) for i in range(6)]
            dets = [Proposal(car(10.0 * i + rng.choice([0.0, 3.0])), float(rng.uniform())) for i in range(6)]
            missed = [i for i, d in enumerate(dets) if d.box.center[0] != gts[i].center[0]]
            if not missed:
                continue
            before = ap_r40(PrCurve.from_matches([match(dets, gts, 0.7)]))
            i = missed[0]
            dets[i] = Proposal(gts[i], dets[i].score)
            after = ap_r40(PrCurve.from_matches([match(dets, gts, 0.7)]))
            assert after >= before - 1e-12

    def test_pr_csv(self, tmp_path):
        curve = PrCurve(np.array([0.5, 1.0]), np.array([1.0, 2 / 3]), 2)
        export_pr(curve, tmp_path / "pr.csv")
        assert (tmp_path / "pr.csv").read_text().splitlines()[0] == "recall,precision"
        recall, precision = read_pr(tmp_path / "pr.csv")
        np.testing.assert_array_equal(recall, curve.recall)
        np.testing.assert_array_equal(precision, curve.precision)
        (tmp_path / "bad.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            read_pr(tmp_path / "bad.csv")


class TestReport:
    def test_evaluate_buckets(self, tmp_path):
        gts = [[car(10.0), car(40.0), Box3D((8.0, 3.0, -0.9), (0.8, 0.6, 1.73), 0.0, 1)]]
        dets = [[Proposal(car(10.0), 0.9), Proposal(car(40.0), 0.8)]]
        report = evaluate(dets, gts)
        assert report.ap["car"]["overall"] == pytest.approx(1.0)
        assert report.ap["car"]["0-30m"] == pytest.approx(1.0)
        assert report.ap["car"]["30-50m"] == pytest.approx(1.0)
        assert report.ap["car"]["50m-inf"] is None
        assert report.ap["pedestrian"]["overall"] == 0.0
        assert report.ap["cyclist"]["overall"] is None
        assert report.mean_ap() == pytest.approx(0.5)

        report.write(tmp_path / "report.json", tmp_path / "pr")
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["num_scenes"] == 1
        assert set(data["ap_r40"]["car"]) == {name for name, _, _ in RANGE_BUCKETS}
        assert (tmp_path / "pr" / "pr_car.csv").is_file()

    def test_scene_count_mismatch(self):
        with pytest.raises(ValueError):
            evaluate([[]], [])

    def test_proposal_recall(self):
        gts = [[car(10.0), car(20.0)], []]
        proposals = [[Proposal(car(10.2), 0.5)], [Proposal(car(5.0), 0.5)]]
        assert proposal_recall(proposals, gts) == pytest.approx(0.5)
        assert proposal_recall([[]], [[]]) is None


class TestSamplingRetention:
    def test_oracle_weight_range(self, scene):
        weights = oracle_distance_weight(scene.cloud.xyz, scene)
        fg = weights > 0
        assert fg.any()
        assert np.all((weights[fg] >= 0.5) & (weights[fg] <= 1.0))

    def test_centerness_sampling_keeps_more_foreground(self):
        scenes = [synth_scene(seed, DESK_SPEC, 4) for seed in range(50)]
        result = sampling_retention(scenes, seed=0)
        assert result.num_scenes == 50
        assert result.centerness > result.uniform

    def test_needs_foreground(self):
        with pytest.raises(ValueError):
            sampling_retention([synth_scene(0, DESK_SPEC, 0)])
