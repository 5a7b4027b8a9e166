import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_denoiser
from nesure import operators
from nesure.errors import ContractError
from nesure.operators import (LinearOperator, bayer_cfa, circular_shifts, flips, identity, inpaint_mask, make_group,
                              make_operator, product, rotations90, virtual_operator)

OPS = [identity((1, 8, 8)), inpaint_mask((1, 8, 8), 0.7, 3), inpaint_mask((3, 6, 6), 0.5, 1), bayer_cfa((3, 6, 6))]
GROUPS = [circular_shifts((2, 4, 4)), circular_shifts((2, 6, 6), stride=2), rotations90((2, 4, 4)), flips((2, 4, 5)),
          make_group("rotations90+flips", (2, 4, 4))]


class TestApply:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 8, 8))
        assert np.array_equal(operators.apply(identity((1, 8, 8)), x), x)
        assert np.array_equal(operators.adjoint(identity((1, 8, 8)), x), x)

    def test_inpaint_keeps_exact_count(self):
        for shape in [(1, 32, 32), (1, 17, 9), (1, 10, 10)]:
            op = inpaint_mask(shape, 0.7, seed=5)
            out = op.apply(np.ones(shape))
            n = shape[1] * shape[2]
            assert out.sum() == round(0.7 * n)
            assert set(np.unique(out)) <= {0.0, 1.0}

    def test_inpaint_mask_shared_across_channels_and_seeded(self):
        op = inpaint_mask((3, 8, 8), 0.7, seed=1)
        assert np.array_equal(op.mask[0], op.mask[1]) and np.array_equal(op.mask[0], op.mask[2])
        assert np.array_equal(inpaint_mask((3, 8, 8), 0.7, 1).mask, op.mask)
        assert not np.array_equal(inpaint_mask((3, 8, 8), 0.7, 2).mask, op.mask)

    def test_bayer_rggb_phases(self):
        op = bayer_cfa((3, 4, 4))
        x = np.stack([np.full((4, 4), v) for v in (0.2, 0.5, 0.9)])
        out = op.apply(x)
        expected_channel = {(0, 0): 0, (0, 1): 1, (1, 0): 1, (1, 1): 2}
        for i in range(4):
            for j in range(4):
                kept = np.nonzero(out[:, i, j])[0]
                assert list(kept) == [expected_channel[(i % 2, j % 2)]]
                assert out[kept[0], i, j] == x[kept[0], i, j]

    def test_bayer_needs_rgb(self):
        with pytest.raises(ContractError):
            bayer_cfa((1, 4, 4))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ContractError):
            OPS[1].apply(rng.random((1, 7, 8)))

    def test_batch_apply(self, rng):
        op = OPS[1]
        x = rng.random((4, 1, 8, 8))
        np.testing.assert_array_equal(op.apply(x)[2], op.apply(x[2]))

    def test_constructor_validation(self):
        with pytest.raises(ContractError):
            LinearOperator("blur", (1, 4, 4))
        with pytest.raises(ContractError):
            LinearOperator("inpaint_mask", (1, 4, 4))
        with pytest.raises(ContractError):
            inpaint_mask((1, 4, 4), keep=0.0)
        with pytest.raises(ContractError):
            make_operator("mri", (1, 4, 4))


@pytest.mark.parametrize("op", OPS, ids=lambda o: f"{o.kind}{o.image_shape}")
class TestOperatorProperties:
    def test_linearity(self, op, rng):
        for _ in range(20):
            x, z = rng.standard_normal((2,) + op.image_shape)
            a, b = rng.standard_normal(2)
            np.testing.assert_allclose(op.apply(a * x + b * z), a * op.apply(x) + b * op.apply(z), atol=1e-12)

    def test_adjoint(self, op, rng):
        for _ in range(100):
            x, z = rng.standard_normal((2,) + op.image_shape)
            assert abs(np.sum(op.apply(x) * z) - np.sum(x * op.adjoint(z))) < 1e-12

    def test_projection(self, op, rng):
        x = rng.standard_normal(op.image_shape)
        assert np.array_equal(op.apply(op.apply(x)), op.apply(x))
        assert np.array_equal(op.adjoint(op.apply(x)), op.apply(x))

    def test_rank(self, op):
        assert op.rank == int(op.apply(np.ones(op.image_shape)).sum())


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: f"{g.kind}{g.image_shape}{g.size}")
class TestGroupProperties:
    def test_identity_element_present(self, group, rng):
        x = rng.standard_normal(group.image_shape)
        assert any(np.array_equal(group.transform(g, x), x) for g in range(group.size))
        assert np.array_equal(group.transform(0, x), x)

    def test_inverse_round_trip(self, group, rng):
        x = rng.standard_normal(group.image_shape)
        for g in range(group.size):
            assert np.array_equal(group.inverse_transform(g, group.transform(g, x)), x)
            assert np.array_equal(group.transform(g, group.inverse_transform(g, x)), x)

    def test_permutation_preserves_norm(self, group, rng):
        x = rng.standard_normal(group.image_shape)
        for g in range(group.size):
            t = group.transform(g, x)
            assert abs(np.linalg.norm(t) - np.linalg.norm(x)) < 1e-12
            assert np.array_equal(np.sort(t.ravel()), np.sort(x.ravel()))

    def test_closure_under_inverse(self, group, rng):
        x = rng.standard_normal(group.image_shape)
        images = [group.transform(g, x) for g in range(group.size)]
        for g in range(group.size):
            inv = group.inverse_transform(g, x)
            assert any(np.array_equal(inv, im) for im in images)

    def test_closure_under_composition(self, group, rng):
        x = rng.standard_normal(group.image_shape)
        images = [group.transform(g, x) for g in range(group.size)]
        for a in range(group.size):
            for b in range(group.size):
                ab = group.transform(a, group.transform(b, x))
                assert any(np.array_equal(ab, im) for im in images)

    def test_index_out_of_range(self, group, rng):
        with pytest.raises(ContractError):
            group.transform(group.size, rng.standard_normal(group.image_shape))


class TestTransforms:
    def test_full_wrap_shift_is_identity(self, rng):
        x = rng.standard_normal((1, 5, 7))
        g = circular_shifts((1, 5, 7))
        y = x
        for _ in range(5):
            y = g.transform(7, y)  # shift by (1, 0)
        assert np.array_equal(y, x)

    def test_shift_element_semantics(self, rng):
        x = rng.standard_normal((1, 4, 6))
        g = circular_shifts((1, 4, 6))
        np.testing.assert_array_equal(g.transform(1 * 6 + 2, x), np.roll(x, (1, 2), axis=(1, 2)))

    def test_group_sizes(self):
        assert circular_shifts((1, 8, 8)).size == 64
        assert circular_shifts((1, 8, 8), stride=4).size == 4
        assert rotations90((1, 4, 4)).size == 4
        assert product(rotations90((1, 4, 4)), flips((1, 4, 4))).size == 16

    def test_rotations_need_square(self):
        with pytest.raises(ContractError):
            rotations90((1, 4, 5))

    def test_unknown_group(self):
        with pytest.raises(ContractError):
            make_group("scalings", (1, 4, 4))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 63), st.integers(0, 2 ** 31))
    def test_shifts_commute_with_circular_convnet(self, g, seed):
        group = circular_shifts((1, 8, 8))
        model = tiny_denoiser((1, 8, 8))
        y = np.random.default_rng(seed).random((1, 8, 8))
        np.testing.assert_allclose(model(group.transform(g, y), 0.1), group.transform(g, model(y, 0.1)), atol=1e-10)


class TestVirtualOperator:
    def test_identity_element(self, rng):
        op = inpaint_mask((1, 6, 6), 0.7, 0)
        v = virtual_operator(op, circular_shifts((1, 6, 6)), 0)
        x = rng.standard_normal((1, 6, 6))
        assert np.array_equal(v.apply(x), op.apply(x))

    def test_mask_after_shift(self, rng):
        op = inpaint_mask((1, 6, 6), 0.7, 0)
        group = circular_shifts((1, 6, 6))
        v = virtual_operator(op, group, 6)  # shift by (1, 0)
        x = rng.standard_normal((1, 6, 6))
        shifted = np.roll(x, 1, axis=1)
        expect = np.where(op.mask, shifted, 0.0)
        assert np.array_equal(v.apply(x), expect)

    def test_virtual_adjoint(self, rng):
        op = inpaint_mask((1, 6, 6), 0.7, 0)
        v = virtual_operator(op, circular_shifts((1, 6, 6)), 13)
        for _ in range(20):
            x, z = rng.standard_normal((2, 1, 6, 6))
            assert abs(np.sum(v.apply(x) * z) - np.sum(x * v.adjoint(z))) < 1e-12

    @pytest.mark.parametrize("keep", [1 / 36, 0.3, 0.7])
    def test_shift_union_covers_all_pixels(self, keep):
        shape = (1, 6, 6)
        op = inpaint_mask(shape, keep, 4)
        group = circular_shifts(shape)
        cover = np.zeros(shape, dtype=bool)
        for g in range(group.size):
            cover |= virtual_operator(op, group, g).keep_map()
        assert cover.all()

    def test_index_checked(self):
        op = identity((1, 4, 4))
        with pytest.raises(ContractError):
            virtual_operator(op, circular_shifts((1, 4, 4)), 16)
        with pytest.raises(ContractError):
            virtual_operator(op, circular_shifts((1, 5, 5)), 0)
