import math

import numpy as np
import pytest

from ssk.bev.anchors import BACKGROUND, FOREGROUND, AnchorConfig, assign_rpn_targets, generate_anchors
from ssk.bev.encoder2d import BaseBlock, BevMap, Downsample, Encoder2D, bev_channels, to_bev
from ssk.bev.rpn import PRIOR_PROBABILITY, RpnHead, RpnOutput, decode_proposals, proposals_to_array
from ssk.geom.boxes import Box3D
from ssk.geom.voxel_spec import VoxelSpec
from ssk.nn.autograd import Tape
from ssk.nn.params import ParamStore
from ssk.voxel.msv import SparseVoxelTensor

# 10×10 BEV cells of 0.8 m, one vertical cell
ANCHOR_SPEC = VoxelSpec((0.0, -4.0, -3.0), (8.0, 4.0, 1.0), (0.8, 0.8, 4.0))
SMALL_WIDTHS = ((4, 4, 4),) * 4


class TestBevFlattening:
    def test_voxel_lands_on_transposed_pixel(self, tape):
        spec = VoxelSpec((0, 0, 0), (3, 2, 2), (1, 1, 1))
        x = SparseVoxelTensor(np.array([[2, 1, 1], [0, 0, 0]]), tape.constant(np.array([[5.0, 6.0], [1.0, 2.0]])), spec)
        bev = to_bev(x)
        assert bev.shape == (2, 3, 4)
        assert bev_channels(2, spec) == 4
        np.testing.assert_array_equal(bev.features.value[1, 2], [0.0, 0.0, 5.0, 6.0])
        np.testing.assert_array_equal(bev.features.value[0, 0], [1.0, 2.0, 0.0, 0.0])
        assert bev.features.value.sum() == 14.0


class TestBlocks:
    def test_base_block_with_and_without_projection(self, rng, tape):
        store = ParamStore()
        same = BaseBlock(store, "same", 4, 2, rng)
        projected = BaseBlock(store, "proj", 3, 4, rng)
        assert same.residual is None and projected.residual is not None
        assert same(tape, tape.constant(rng.normal(size=(5, 6, 4)))).shape == (5, 6, 2)
        assert projected(tape, tape.constant(rng.normal(size=(5, 6, 3)))).shape == (5, 6, 4)
        with pytest.raises(ValueError):
            same(tape, tape.constant(rng.normal(size=(5, 6, 3))))

    @pytest.mark.parametrize("size,expected", [(8, 4), (5, 3), (1, 1)])
    def test_downsample_halves(self, rng, tape, size, expected):
        down = Downsample(ParamStore(), "down", 4, rng)
        assert down(tape, tape.constant(rng.normal(size=(size, size, 4)))).shape == (expected, expected, 4)


class TestEncoder2D:
    def make_maps(self, rng, tape, sizes, channels):
        spec = VoxelSpec((0, 0, 0), (1, 1, 1), (1, 1, 1))
        return [BevMap(tape.constant(rng.normal(size=(s, s, c))), spec) for s, c in zip(sizes, channels, strict=True)]

    def test_fused_map_is_coarsest(self, rng, tape):
        encoder = Encoder2D(ParamStore(), [3, 3, 5, 5], rng, SMALL_WIDTHS)
        fused = encoder(tape, self.make_maps(rng, tape, [8, 4, 2, 1], [3, 3, 5, 5]))
        assert fused.shape == (1, 1, 4)
        assert encoder.out_channels == 4

    def test_map_size_mismatch(self, rng, tape):
        encoder = Encoder2D(ParamStore(), [3, 3, 5, 5], rng, SMALL_WIDTHS)
        with pytest.raises(ValueError):
            encoder(tape, self.make_maps(rng, tape, [8, 8, 2, 1], [3, 3, 5, 5]))

    def test_channel_mismatch(self, rng, tape):
        encoder = Encoder2D(ParamStore(), [3, 3, 5, 5], rng, SMALL_WIDTHS)
        with pytest.raises(ValueError):
            encoder(tape, self.make_maps(rng, tape, [8, 4, 2, 1], [3, 3, 3, 5]))

    def test_schedule_validation(self, rng):
        with pytest.raises(ValueError):
            Encoder2D(ParamStore(), [3, 3], rng, SMALL_WIDTHS)
        with pytest.raises(ValueError):
            Encoder2D(ParamStore(), [3, 3, 5, 5], rng, ((4, 4),) * 4)

    def test_downsample_reads_block_output(self, rng):
        store = ParamStore()
        encoder = Encoder2D(store, [3, 3], rng, SMALL_WIDTHS[:2])
        maps_tape = Tape(training=False, grad=False)
        maps = self.make_maps(rng, maps_tape, [4, 2], [3, 3])

        def fused():
            return encoder(Tape(training=False, grad=False), maps).features.value.copy()

        before = fused()
        # B_1 feeds nothing downstream, so its integration convs cannot reach B_2
        for conv in ("integrate1", "integrate3"):
            weight = store.get(f"enc2d.branch1.{conv}.weight")
            weight[...] = rng.normal(size=weight.shape)
        np.testing.assert_array_equal(fused(), before)

        weight = store.get("enc2d.branch1.block3.integrate3.weight")
        weight[...] = rng.normal(size=weight.shape)
        assert not np.array_equal(fused(), before)


class TestAnchors:
    def test_order_and_count(self):
        anchors = generate_anchors(ANCHOR_SPEC)
        assert len(anchors) == 10 * 10 * 6
        assert (anchors.height, anchors.width) == (10, 10)
        np.testing.assert_allclose(anchors.boxes[0], [0.4, -3.6, -1.0, 3.9, 1.6, 1.56, 0.0])
        np.testing.assert_allclose(anchors.boxes[1, 6], math.pi / 2)
        np.testing.assert_array_equal(anchors.classes[:6], [0, 0, 1, 1, 2, 2])
        # next anchor cell moves along x first
        np.testing.assert_allclose(anchors.boxes[6, :2], [1.2, -3.6])
        np.testing.assert_allclose(anchors.boxes[60, :2], [0.4, -2.8])

    def test_matching_anchor_is_foreground(self):
        anchors = generate_anchors(ANCHOR_SPEC)
        gt = Box3D.from_array(anchors.boxes[330], 0)
        targets = assign_rpn_targets(anchors, [gt])
        assert targets.labels[330] == FOREGROUND
        assert targets.matched_gt[330] == 0
        np.testing.assert_allclose(targets.residuals[330], 0.0, atol=1e-12)
        assert np.all(targets.labels[anchors.classes != 0] == BACKGROUND)
        # the quarter-turned anchor at the same cell overlaps too little
        assert targets.labels[331] == BACKGROUND

    def test_weak_gt_is_forced_onto_best_anchor(self):
        anchors = generate_anchors(ANCHOR_SPEC)
        ped = Box3D((3.99, 0.4, -0.915), (0.8, 0.6, 1.73), 0.0, 1)
        targets = assign_rpn_targets(anchors, [ped])
        fg = np.nonzero(targets.labels == FOREGROUND)[0]
        np.testing.assert_array_equal(fg, [326])
        assert targets.num_foreground == 1

    def test_no_ground_truth(self):
        targets = assign_rpn_targets(generate_anchors(ANCHOR_SPEC), [])
        assert np.all(targets.labels == BACKGROUND)
        assert np.all(targets.matched_gt == -1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AnchorConfig(pos_iou=(0.3, 0.5, 0.5))
        with pytest.raises(ValueError):
            AnchorConfig(sizes=((1.0, 1.0, 1.0),))


class TestRpn:
    def test_prior_probability(self, rng, tape):
        head = RpnHead(ParamStore(), 4, 6, rng)
        out = head(tape, BevMap(tape.constant(np.zeros((3, 2, 4))), ANCHOR_SPEC))
        assert out.logits.shape == (36,)
        assert out.residuals.shape == (36, 7)
        np.testing.assert_allclose(1.0 / (1.0 + np.exp(-out.logits.value)), PRIOR_PROBABILITY)

    def test_decode_keeps_best_anchor_first(self, tape):
        anchors = generate_anchors(ANCHOR_SPEC)
        logits = np.full(len(anchors), -4.0)
        logits[330] = 5.0
        out = RpnOutput(tape.constant(logits), tape.constant(np.zeros((len(anchors), 7))))
        proposals = decode_proposals(out, anchors, top_n=3, nms_iou=0.7)
        assert len(proposals) == 3
        np.testing.assert_allclose(proposals[0].box.as_array(), anchors.boxes[330])
        assert proposals[0].box.class_id == 0
        assert proposals[0].score == pytest.approx(1.0 / (1.0 + math.exp(-5.0)))
        assert proposals_to_array(proposals).shape == (3, 7)
        assert proposals_to_array([]).shape == (0, 7)

    def test_decode_validation(self, tape):
        anchors = generate_anchors(ANCHOR_SPEC)
        out = RpnOutput(tape.constant(np.zeros(5)), tape.constant(np.zeros((5, 7))))
        with pytest.raises(ValueError):
            decode_proposals(out, anchors, top_n=3, nms_iou=0.7)
        with pytest.raises(ValueError):
            decode_proposals(out, anchors, top_n=0, nms_iou=0.7)
