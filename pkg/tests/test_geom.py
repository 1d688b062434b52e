import math

import numpy as np
import pytest

from ssk.geom.boxes import (
    Box3D,
    assign_points_to_boxes,
    centerness_mask,
    decode_box_residual,
    encode_box_residual,
    point_centerness,
    points_in_box,
    surface_distances,
    wrap_angle,
)
from ssk.geom.iou import iou_3d, iou_bev, iou_matrix, polygon_area, rotated_nms
from ssk.geom.voxel_spec import VoxelSpec, voxel_to_world, world_to_voxel


def random_box(rng, class_id=0) -> Box3D:
    return Box3D(
        tuple(rng.uniform(-1.0, 1.0, 3)),
        tuple(rng.uniform(1.5, 3.0, 3)),
        rng.uniform(-math.pi, math.pi),
        class_id,
    )


class TestBox3D:
    def test_wrap_angle_range(self):
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        wrapped = wrap_angle(np.linspace(-20, 20, 101))
        assert np.all(wrapped > -math.pi) and np.all(wrapped <= math.pi)

    def test_yaw_is_wrapped_on_construction(self):
        box = Box3D((0, 0, 0), (1, 1, 1), 2 * math.pi + 0.25)
        assert box.yaw == pytest.approx(0.25)

    @pytest.mark.parametrize(
        "center,dims",
        [((0, 0, 0), (1, 0, 1)), ((0, 0, 0), (1, -1, 1)), ((0, math.nan, 0), (1, 1, 1)), ((0, 0), (1, 1, 1))],
    )
    def test_invalid_boxes(self, center, dims):
        with pytest.raises(ValueError):
            Box3D(center, dims)

    def test_surface_distances_axis_aligned(self):
        box = Box3D((1.0, 2.0, 3.0), (4.0, 2.0, 2.0))
        d = surface_distances(np.array([1.5, 2.0, 3.0]), box)
        np.testing.assert_allclose(d.stack(), [1.5, 2.5, 1.0, 1.0, 1.0, 1.0])


class TestCenterness:
    box = Box3D((0.0, 0.0, 0.0), (4.0, 2.0, 2.0))

    def test_center_is_one(self):
        assert centerness_mask(np.zeros(3), self.box) == pytest.approx(1.0)

    def test_face_and_outside_are_zero(self):
        assert centerness_mask(np.array([2.0, 0.0, 0.0]), self.box) == 0.0
        assert centerness_mask(np.array([0.0, 1.0, 0.0]), self.box) == 0.0
        assert centerness_mask(np.array([5.0, 0.0, 0.0]), self.box) == 0.0

    def test_quarter_points(self):
        assert centerness_mask(np.array([1.0, 0.0, 0.0]), self.box) == pytest.approx((1 / 3) ** (1 / 3))
        assert centerness_mask(np.array([1.0, 0.5, 0.0]), self.box) == pytest.approx((1 / 9) ** (1 / 3))

    def test_rotation_invariant(self, rng):
        local = rng.uniform(-0.9, 0.9, (50, 3)) * np.array([2.0, 1.0, 1.0])
        rotated = Box3D((3.0, -1.0, 0.5), (4.0, 2.0, 2.0), 0.7)
        c, s = math.cos(0.7), math.sin(0.7)
        world = np.stack(
            [c * local[:, 0] - s * local[:, 1] + 3.0, s * local[:, 0] + c * local[:, 1] - 1.0, local[:, 2] + 0.5],
            axis=1,
        )
        np.testing.assert_allclose(centerness_mask(world, rotated), centerness_mask(local, self.box), atol=1e-12)

    def test_background_points_get_zero(self):
        boxes = [self.box, Box3D((10.0, 0.0, 0.0), (2.0, 2.0, 2.0))]
        points = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
        owner = assign_points_to_boxes(points, boxes)
        np.testing.assert_array_equal(owner, [0, 1, -1])
        np.testing.assert_allclose(point_centerness(points, boxes, owner), [1.0, 1.0, 0.0])

    def test_first_box_wins_on_overlap(self):
        boxes = [Box3D((0, 0, 0), (2, 2, 2)), Box3D((0.5, 0, 0), (2, 2, 2))]
        assert assign_points_to_boxes(np.array([[0.2, 0.0, 0.0]]), boxes)[0] == 0

    def test_points_in_box_is_closed(self):
        assert points_in_box(np.array([[2.0, 1.0, 1.0]]), self.box)[0]
        assert not points_in_box(np.array([[2.01, 0.0, 0.0]]), self.box)[0]


class TestResidualCoding:
    def test_round_trip(self, rng):
        for _ in range(20):
            gt, anchor = random_box(rng), random_box(rng)
            decoded = decode_box_residual(encode_box_residual(gt, anchor), anchor)
            np.testing.assert_allclose(decoded[:6], gt.as_array()[:6], rtol=1e-12, atol=1e-12)
            assert wrap_angle(decoded[6] - gt.yaw) == pytest.approx(0.0, abs=1e-12)

    def test_identity_is_zero(self):
        box = Box3D((1, 2, 3), (3.9, 1.6, 1.56), 0.3)
        np.testing.assert_allclose(encode_box_residual(box, box), np.zeros(7), atol=1e-15)

    def test_batched(self, rng):
        gts = np.stack([random_box(rng).as_array() for _ in range(5)])
        anchors = np.stack([random_box(rng).as_array() for _ in range(5)])
        assert encode_box_residual(gts, anchors).shape == (5, 7)


class TestVoxelSpec:
    spec = VoxelSpec((0.0, -9.6, -3.0), (19.2, 9.6, 1.0), (0.1, 0.1, 0.1))

    def test_grid_dims(self):
        assert self.spec.grid_dims == (192, 192, 40)
        assert self.spec.scaled(2.0).grid_dims == (96, 96, 20)
        assert self.spec.scaled((4, 4, 1)).grid_dims == (48, 48, 40)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            VoxelSpec((0, 0, 0), (1, 1, 1), (0.1, 0.0, 0.1))
        with pytest.raises(ValueError):
            VoxelSpec((0, 0, 0), (0, 1, 1), (0.1, 0.1, 0.1))

    def test_world_voxel_consistency(self, rng):
        points = rng.uniform(self.spec.range_min, self.spec.range_max, (500, 3))
        idx = world_to_voxel(points, self.spec)
        centers = voxel_to_world(idx, self.spec)
        assert np.all(np.abs(centers - points) <= 0.05 + 1e-9)
        np.testing.assert_array_equal(world_to_voxel(centers, self.spec), idx)

    def test_corner_voxel(self):
        np.testing.assert_array_equal(world_to_voxel(np.array([0.05, -9.55, -2.95]), self.spec), [0, 0, 0])
        np.testing.assert_allclose(voxel_to_world(np.array([0, 0, 0]), self.spec), [0.05, -9.55, -2.95])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            world_to_voxel(np.array([19.2, 0.0, 0.0]), self.spec)
        with pytest.raises(ValueError):
            voxel_to_world(np.array([192, 0, 0]), self.spec)

    def test_flat_keys_order(self):
        coords = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]])
        keys = self.spec.flat_keys(coords)
        assert list(keys) == sorted(keys)
        np.testing.assert_array_equal(self.spec.unflatten_keys(keys), coords)


class TestIoU:
    def test_polygon_area(self):
        square = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
        assert polygon_area(square) == pytest.approx(4.0)

    def test_identical_and_disjoint(self):
        a = Box3D((0, 0, 0), (4, 2, 1.5), 0.4)
        assert iou_bev(a, a) == pytest.approx(1.0)
        assert iou_3d(a, a) == pytest.approx(1.0)
        assert iou_3d(a, Box3D((20, 0, 0), (4, 2, 1.5))) == 0.0
        assert iou_3d(a, Box3D((0, 0, 5), (4, 2, 1.5), 0.4)) == 0.0

    def test_half_overlap(self):
        a = Box3D((0, 0, 0), (2, 2, 2))
        b = Box3D((1, 0, 0), (2, 2, 2))
        assert iou_bev(a, b) == pytest.approx(1 / 3)
        assert iou_3d(a, b) == pytest.approx(1 / 3)

    def test_quarter_turn_square(self):
        a = Box3D((0, 0, 0), (2, 2, 1))
        assert iou_bev(a, Box3D((0, 0, 0), (2, 2, 1), math.pi / 2)) == pytest.approx(1.0)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            local = rng.uniform(-0.5, 0.5, (400_000, 3)) * np.asarray(a.dims)
            c, s = math.cos(a.yaw), math.sin(a.yaw)
            samples = np.stack(
                [
                    c * local[:, 0] - s * local[:, 1] + a.center[0],
                    s * local[:, 0] + c * local[:, 1] + a.center[1],
                    local[:, 2] + a.center[2],
                ],
                axis=1,
            )
            inter = points_in_box(samples, b).mean() * a.volume
            estimate = inter / (a.volume + b.volume - inter)
            assert abs(iou_3d(a, b) - estimate) < 1e-2

    def test_iou_matrix(self, rng):
        boxes = np.stack([random_box(rng).as_array() for _ in range(4)])
        matrix = iou_matrix(boxes, boxes, "3d")
        assert matrix.shape == (4, 4)
        np.testing.assert_allclose(np.diag(matrix), 1.0)
        np.testing.assert_allclose(matrix, matrix.T, atol=1e-12)
        assert iou_matrix(boxes[:0], boxes).shape == (0, 4)
        with pytest.raises(ValueError):
            iou_matrix(boxes, boxes, "2d")


class TestRotatedNms:
    def test_suppresses_duplicates(self):
        box = Box3D((0, 0, 0), (4, 2, 1.5)).as_array()
        far = Box3D((20, 0, 0), (4, 2, 1.5)).as_array()
        keep = rotated_nms(np.stack([box, box, far]), np.array([0.5, 0.9, 0.1]), 0.5)
        np.testing.assert_array_equal(keep, [1, 2])

    def test_ties_keep_lower_index(self):
        box = Box3D((0, 0, 0), (4, 2, 1.5)).as_array()
        keep = rotated_nms(np.stack([box, box]), np.array([0.7, 0.7]), 0.5)
        np.testing.assert_array_equal(keep, [0])

    def test_top_n(self):
        boxes = np.stack([Box3D((10.0 * i, 0, 0), (1, 1, 1)).as_array() for i in range(5)])
        keep = rotated_nms(boxes, np.arange(5, dtype=float), 0.5, top_n=2)
        np.testing.assert_array_equal(keep, [4, 3])
