from itertools import product

import numpy as np
import pytest

from ssk.core.config import DESK_SPEC
from ssk.geom.voxel_spec import VoxelSpec
from ssk.nn.autograd import Tape
from ssk.nn.gradcheck import finite_difference_check
from ssk.nn.params import ParamStore
from ssk.sparse3d.conv import SparseConv3d, sparse_conv_apply
from ssk.sparse3d.encoder import Encoder3D, EncoderConfig, align_to, union_concat
from ssk.sparse3d.rulebook import CENTER_OFFSET, KERNEL_OFFSETS, ConvMode, build_rulebook, strided_output_dims
from ssk.voxel.msv import SparseVoxelTensor, level_specs

GRID = (6, 5, 4)


def random_sites(rng, dims, count):
    flat = rng.choice(int(np.prod(dims)), size=count, replace=False)
    return np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64)


def dense_reference(coords, features, dims, weight, stride, out_coords):
    """Zero-padded dense 3×3×3 correlation evaluated at ``out_coords``."""
    dense = np.zeros(tuple(d + 2 for d in dims) + (features.shape[1],))
    for c, f in zip(coords, features, strict=True):
        dense[tuple(c + 1)] = f
    out = np.zeros((len(out_coords), weight.shape[2]))
    for row, o in enumerate(out_coords):
        for k, offset in enumerate(KERNEL_OFFSETS):
            out[row] += dense[tuple(o * np.asarray(stride) + offset + 1)] @ weight[k]
    return out


def brute_force_outputs(coords, dims, stride):
    active = {tuple(c) for c in coords}
    out_dims = strided_output_dims(dims, stride)
    found = []
    for o in product(*(range(d) for d in out_dims)):
        base = np.asarray(o) * np.asarray(stride)
        if any(tuple(base + offset) in active for offset in KERNEL_OFFSETS):
            found.append(o)
    return np.array(found, dtype=np.int64).reshape(-1, 3)


class TestRulebook:
    def test_submanifold_keeps_sites(self, rng):
        coords = random_sites(rng, GRID, 30)
        rb = build_rulebook(coords, GRID)
        np.testing.assert_array_equal(rb.out_coords, coords)
        np.testing.assert_array_equal(np.sort(rb.in_slots[CENTER_OFFSET]), np.arange(30))
        for k, offset in enumerate(KERNEL_OFFSETS):
            np.testing.assert_array_equal(coords[rb.in_slots[k]], coords[rb.out_slots[k]] + offset)

    @pytest.mark.parametrize("stride", [(2, 2, 2), (2, 2, 1), (1, 1, 1)])
    def test_strided_active_set(self, rng, stride):
        coords = random_sites(rng, GRID, 25)
        rb = build_rulebook(coords, GRID, stride, ConvMode.STRIDED)
        np.testing.assert_array_equal(rb.out_coords, brute_force_outputs(coords, GRID, stride))
        assert rb.out_dims == strided_output_dims(GRID, stride)

    def test_output_dims(self):
        assert strided_output_dims((192, 192, 40), (2, 2, 2)) == (96, 96, 20)
        assert strided_output_dims((5, 5, 5), (2, 2, 1)) == (3, 3, 5)

    def test_invalid_inputs(self):
        coords = np.array([[0, 0, 0], [1, 1, 1]])
        with pytest.raises(ValueError):
            build_rulebook(coords, GRID, (2, 2, 2), ConvMode.SUBMANIFOLD)
        with pytest.raises(ValueError):
            build_rulebook(np.array([[0, 0, 0], [0, 0, 0]]), GRID)
        with pytest.raises(ValueError):
            build_rulebook(np.array([[6, 0, 0]]), GRID)
        with pytest.raises(ValueError):
            build_rulebook(coords, GRID, (0, 1, 1), ConvMode.STRIDED)

    def test_empty_input(self):
        rb = build_rulebook(np.zeros((0, 3)), GRID, (2, 2, 2), ConvMode.STRIDED)
        assert rb.num_outputs == 0 and rb.num_pairs() == 0


class TestSparseConv:
    @pytest.mark.parametrize(
        "stride,mode",
        [((1, 1, 1), ConvMode.SUBMANIFOLD), ((2, 2, 2), ConvMode.STRIDED), ((2, 2, 1), ConvMode.STRIDED)],
    )
    def test_matches_dense_convolution(self, rng, stride, mode):
        coords = random_sites(rng, GRID, 30)
        features, weight, bias = rng.normal(size=(30, 3)), rng.normal(size=(27, 3, 2)), rng.normal(size=2)
        rb = build_rulebook(coords, GRID, stride, mode)
        tape = Tape()
        out = sparse_conv_apply(rb, tape.constant(features), tape.constant(weight), tape.constant(bias))
        expected = dense_reference(coords, features, GRID, weight, stride, rb.out_coords) + bias
        np.testing.assert_allclose(out.value, expected, rtol=0, atol=1e-10)

    def test_gradients(self, rng):
        coords = random_sites(rng, GRID, 10)
        rb = build_rulebook(coords, GRID, (2, 2, 2), ConvMode.STRIDED)
        coef = rng.normal(size=(rb.num_outputs, 3))

        def op(tape, leaves):
            return sparse_conv_apply(rb, *leaves) * coef

        inputs = [rng.normal(size=(10, 2)), rng.normal(size=(27, 2, 3)), rng.normal(size=3)]
        assert finite_difference_check(op, inputs) < 1e-4

    def test_shape_checks(self, rng, tape):
        rb = build_rulebook(random_sites(rng, GRID, 4), GRID)
        with pytest.raises(ValueError):
            sparse_conv_apply(rb, tape.constant(np.zeros((5, 2))), tape.constant(np.zeros((27, 2, 3))))
        with pytest.raises(ValueError):
            sparse_conv_apply(rb, tape.constant(np.zeros((4, 2))), tape.constant(np.zeros((9, 2, 3))))

    def test_module_scales_spec(self, rng, tape):
        spec = VoxelSpec((0, 0, 0), (6, 5, 4), (1, 1, 1))
        x = SparseVoxelTensor(random_sites(rng, GRID, 12), tape.constant(rng.normal(size=(12, 4))), spec)
        out = SparseConv3d(ParamStore(), "conv", 4, 8, rng, (2, 2, 2), ConvMode.STRIDED)(tape, x)
        assert out.channels == 8
        assert out.spec.grid_dims == (3, 3, 2)
        with pytest.raises(ValueError):
            SparseConv3d(ParamStore(), "conv", 4, 8, rng, (2, 2, 2), ConvMode.SUBMANIFOLD)


class TestCrossBranch:
    fine = VoxelSpec((0, 0, 0), (4, 4, 4), (1, 1, 1))
    coarse = VoxelSpec((0, 0, 0), (4, 4, 4), (2, 2, 2))

    def test_align_mean_pools(self, tape):
        x = SparseVoxelTensor(
            np.array([[0, 0, 0], [1, 1, 1], [2, 0, 0]]), tape.constant(np.array([[1.0], [3.0], [5.0]])), self.fine
        )
        pooled = align_to(x, self.coarse)
        np.testing.assert_array_equal(pooled.coords, [[0, 0, 0], [1, 0, 0]])
        np.testing.assert_allclose(pooled.features.value, [[2.0], [5.0]])

    def test_misaligned_grids(self, tape):
        x = SparseVoxelTensor(np.zeros((1, 3)), tape.constant(np.ones((1, 1))), self.fine)
        with pytest.raises(ValueError, match="misalignment"):
            align_to(x, VoxelSpec((0, 0, 0), (4, 4, 4), (1.5, 1.5, 1.5)))

    def test_union_zero_fills(self, tape):
        a = SparseVoxelTensor(np.array([[0, 0, 0], [1, 0, 0]]), tape.constant(np.array([[1.0], [2.0]])), self.fine)
        b = SparseVoxelTensor(np.array([[1, 0, 0], [2, 0, 0]]), tape.constant(np.array([[10.0], [20.0]])), self.fine)
        joined = union_concat(a, b, "F")
        np.testing.assert_array_equal(joined.coords, [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        np.testing.assert_array_equal(joined.features.value, [[1.0, 0.0], [2.0, 10.0], [0.0, 20.0]])


class TestEncoder3D:
    def test_branch_outputs(self, rng, tape):
        specs = level_specs(VoxelSpec(DESK_SPEC.range_min, DESK_SPEC.range_max, (0.4, 0.4, 0.4)))
        inputs = []
        for i, spec in enumerate(specs):
            count = min(40, spec.num_voxels // 2)
            inputs.append(SparseVoxelTensor(random_sites(rng, spec.grid_dims, count), tape.constant(rng.normal(size=(count, 8))), spec, f"S{i + 1}"))
        encoder = Encoder3D(ParamStore(), [8, 8, 8, 8], rng)
        out = encoder(tape, inputs)

        assert encoder.out_channels == [16, 16, 32, 32]
        assert [t.channels for t in out] == encoder.out_channels
        assert [t.level for t in out] == ["F1", "F2", "F3", "F4"]
        for t, spec in zip(out, encoder.output_specs(specs), strict=True):
            assert t.spec.grid_dims == spec.grid_dims
            assert len(t) > 0
            assert np.all(t.coords < np.asarray(spec.grid_dims))
        np.testing.assert_allclose(out[2].spec.voxel_size, np.asarray(specs[2].voxel_size) * (4, 4, 2))
        np.testing.assert_allclose(out[3].spec.voxel_size, np.asarray(specs[3].voxel_size) * (4, 4, 1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(branch_strides=(((2, 2, 2), (2, 2, 2)),) * 4)
        with pytest.raises(ValueError):
            EncoderConfig(layout=("dense",))
        with pytest.raises(ValueError):
            Encoder3D(ParamStore(), [8, 8], np.random.default_rng(0))
