import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mscaps import capsules as C
from mscaps.model import NetConfig
from mscaps.rng import make_rng
from mscaps.tensor import Tensor, TensorError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSquash:
    def test_three_four(self):
        out = C.squash(Tensor([3.0, 4.0])).data
        np.testing.assert_allclose(out, [15 / 26, 20 / 26], rtol=1e-9)

    def test_unit_vector_gives_half(self):
        v = np.zeros(8)
        v[3] = 1.0
        assert abs(np.linalg.norm(C.squash(Tensor(v)).data) - 0.5) < 1e-9

    def test_zero_maps_to_zero_with_finite_gradient(self):
        s = Tensor(np.zeros((2, 8)), requires_grad=True)
        out = C.squash(s)
        np.testing.assert_array_equal(out.data, 0.0)
        from mscaps.tensor import sum as tsum

        tsum(out).backward()
        assert np.isfinite(s.grad).all()

    def test_array_and_tensor_versions_agree(self):
        s = make_rng(1).normal(size=(5, 8))
        np.testing.assert_array_equal(C.squash_array(s), C.squash(Tensor(s)).data)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 8, elements=finite))
    def test_length_below_one_and_direction_kept(self, s):
        v = C.squash(Tensor(s)).data
        n_s, n_v = np.linalg.norm(s), np.linalg.norm(v)
        assert n_v < 1.0
        if n_s > 1e-6:
            assert abs(n_v - n_s**2 / (1 + n_s**2)) < 1e-9
            cos = float(v @ s) / (n_v * n_s)
            assert cos > 1 - 1e-9


class TestVectorNorm:
    def test_values_and_zero_gradient(self):
        v = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]), requires_grad=True)
        n = C.vector_norm(v)
        np.testing.assert_array_equal(n.data, [5.0, 0.0])
        from mscaps.tensor import sum as tsum

        tsum(n).backward()
        np.testing.assert_allclose(v.grad, [[0.6, 0.8], [0.0, 0.0]])


def _squash_list(s, eps=1e-9):
    q = sum(x * x for x in s)
    scale = q / (1 + q) / (math.sqrt(q) + eps)
    return [x * scale for x in s]


def _route_oracle(u, iterations):
    """Straight-line routing on Python lists: u[i][j] is a vector."""
    n_in, n_out = len(u), len(u[0])
    b = [[0.0] * n_out for _ in range(n_in)]
    for it in range(iterations):
        c = []
        for i in range(n_in):
            e = [math.exp(x) for x in b[i]]
            c.append([x / sum(e) for x in e])
        v = []
        for j in range(n_out):
            s = [sum(c[i][j] * u[i][j][d] for i in range(n_in)) for d in range(len(u[0][0]))]
            v.append(_squash_list(s))
        if it < iterations - 1:
            for i in range(n_in):
                for j in range(n_out):
                    b[i][j] += sum(a * w for a, w in zip(u[i][j], v[j]))
    return b, c, v


class TestRouting:
    @pytest.mark.parametrize("iters", [1, 2, 3, 7])
    def test_single_input_single_output_is_squash(self, iters):
        u = make_rng(2).normal(size=(1, 1, 8))
        v, state = C.route(Tensor(u), iters)
        np.testing.assert_array_equal(v.data, C.squash_array(u[0]))
        np.testing.assert_array_equal(state.c, 1.0)

    def test_single_input_scales_each_output_by_its_coupling(self):
        u = make_rng(2).normal(size=(1, 3, 4))
        v, state = C.route(Tensor(u), 3)
        np.testing.assert_allclose(v.data, C.squash_array(state.c[0][:, None] * u[0]), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("iters", [1, 2, 3])
    def test_identical_predictions_keep_uniform_coupling(self, iters):
        vec = make_rng(3).normal(size=4)
        u = np.broadcast_to(vec, (2, 2, 4)).copy()
        _, state = C.route(Tensor(u), iters)
        np.testing.assert_array_equal(state.c, 0.5)

    def test_identical_inputs_share_coupling_rows(self):
        row = make_rng(3).normal(size=(2, 4))
        u = np.stack([row] * 5)
        _, state = C.route(Tensor(u), 3)
        np.testing.assert_allclose(state.c, np.broadcast_to(state.c[0], state.c.shape), rtol=0, atol=1e-15)

    def test_two_in_one_out_straight_line(self):
        u = [[[1.0, 0.0]], [[0.0, 1.0]]]
        for iters in (1, 2, 3):
            b, c, v = _route_oracle(u, iters)
            got_v, state = C.route(Tensor(np.array(u)), iters)
            np.testing.assert_allclose(got_v.data, v, rtol=0, atol=1e-12)
            np.testing.assert_allclose(state.c, c, rtol=0, atol=1e-12)
            np.testing.assert_allclose(state.b, b, rtol=0, atol=1e-12)
        np.testing.assert_allclose(v[0], [2 / 3 / math.sqrt(2)] * 2, atol=1e-9)

    @pytest.mark.parametrize("mode", C.ROUTE_GRAD_MODES)
    @pytest.mark.parametrize("iters", [1, 2, 3, 5])
    def test_matches_oracle_multi_output(self, mode, iters):
        u = make_rng(4).normal(size=(3, 2, 4))
        b, c, v = _route_oracle(u.tolist(), iters)
        got_v, state = C.route(Tensor(u), iters, mode)
        np.testing.assert_allclose(got_v.data, v, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.c, c, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.b, b, rtol=0, atol=1e-12)

    def test_batched_leading_dims(self):
        u = make_rng(5).normal(size=(2, 3, 4, 2, 5))
        v, state = C.route(Tensor(u), 3)
        assert v.shape == (2, 3, 2, 5) and state.c.shape == (2, 3, 4, 2)
        np.testing.assert_allclose(v.data[1, 2], C.route(Tensor(u[1, 2]), 3)[0].data, rtol=0, atol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.permutations(range(5)))
    def test_input_permutation_equivariance(self, seed, perm):
        u = make_rng(seed).normal(size=(5, 3, 4))
        v, state = C.route(Tensor(u), 3)
        vp, sp = C.route(Tensor(u[list(perm)]), 3)
        np.testing.assert_allclose(vp.data, v.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(sp.c, state.c[list(perm)], rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_couplings_on_simplex(self, seed, iters):
        u = make_rng(seed).normal(size=(6, 3, 4)) * 3
        _, state = C.route(Tensor(u), iters)
        assert (state.c >= 0).all()
        np.testing.assert_allclose(state.c.sum(-1), 1.0, rtol=0, atol=1e-12)

    def test_modes_share_forward_values(self):
        u = make_rng(6).normal(size=(4, 3, 2, 5))
        a, _ = C.route(Tensor(u), 3, "final_only")
        b, _ = C.route(Tensor(u), 3, "full")
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-14)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            C.route(Tensor(np.zeros((2, 2, 2))), 0)
        with pytest.raises(ValueError):
            C.route(Tensor(np.zeros((2, 2, 2))), 1, "sometimes")
        with pytest.raises(TensorError):
            C.route(Tensor(np.zeros((2, 2))), 1)


class TestCapsuleLayers:
    def test_capsule_transform_matches_einsum(self):
        rng = make_rng(7)
        x, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(4, 5, 6))
        np.testing.assert_allclose(C.capsule_transform(Tensor(x), Tensor(w)).data, np.einsum("nie,ieo->nio", x, w), rtol=1e-13)

    def test_primary_capsules_shape_and_length(self):
        rng = make_rng(8)
        caps = C.primary_capsules(Tensor(rng.normal(size=(2, 9, 9, 4))), Tensor(rng.normal(size=(3, 3, 4, 16))), Tensor(np.zeros(16)))
        assert caps.shape == (2, 7, 7, 2, 8)
        assert (np.linalg.norm(caps.data, axis=-1) < 1).all()

    def test_conv_capsule_single_position_is_route(self):
        rng = make_rng(9)
        grid = C.squash_array(rng.normal(size=(1, 3, 3, 2, 8)))
        w = rng.normal(size=(3, 3, 2, 4, 8, 8)) * 0.3
        v, state = C.conv_capsule(Tensor(grid), Tensor(w), 3)
        assert v.shape == (1, 1, 1, 4, 8)
        u = np.einsum("yxtode,yxte->yxtod", w, grid[0]).reshape(18, 4, 8)
        ref, ref_state = C.route(Tensor(u), 3)
        np.testing.assert_allclose(v.data[0, 0, 0], ref.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.c[0], ref_state.c, rtol=0, atol=1e-12)

    def test_conv_capsule_weights_shared_over_positions(self):
        rng = make_rng(10)
        grid = C.squash_array(rng.normal(size=(1, 5, 5, 2, 8)))
        w = rng.normal(size=(3, 3, 2, 4, 8, 8)) * 0.3
        v, _ = C.conv_capsule(Tensor(grid), Tensor(w), 3)
        assert v.shape == (1, 3, 3, 4, 8)
        corner, _ = C.conv_capsule(Tensor(grid[:, 2:, 1:4]), Tensor(w), 3)
        np.testing.assert_allclose(v.data[0, 2, 1], corner.data[0, 0, 0], rtol=0, atol=1e-12)

    def test_class_capsules_is_route_on_flat_predictions(self):
        rng = make_rng(11)
        grid = C.squash_array(rng.normal(size=(2, 3, 3, 4, 8)))
        w = rng.normal(size=(36, 2, 16, 8)) * 0.3
        v, _ = C.class_capsules(Tensor(grid), Tensor(w), 3)
        assert v.shape == (2, 2, 16)
        for n in range(2):
            u = np.einsum("icde,ie->icd", w, grid[n].reshape(36, 8))
            np.testing.assert_allclose(v.data[n], C.route(Tensor(u), 3)[0].data, rtol=0, atol=1e-12)

    def test_layer_shape_mismatches(self):
        with pytest.raises(TensorError):
            C.class_capsules(Tensor(np.zeros((1, 3, 3, 4, 8))), Tensor(np.zeros((35, 2, 16, 8))))
        with pytest.raises(TensorError):
            C.conv_capsule(Tensor(np.zeros((1, 3, 3, 2, 8))), Tensor(np.zeros((3, 3, 3, 4, 8, 8))))
        with pytest.raises(TensorError):
            C.unfold_grid(Tensor(np.zeros((1, 2, 2, 1, 8))), 3)

    @pytest.mark.parametrize("r, k, expected", [(9, 3, (7, 3, 5)), (9, 5, (5, 3, 3)), (5, 5, (1, 1, 1)), (17, 5, (13, 3, 11))])
    def test_branch_geometry(self, r, k, expected):
        assert NetConfig(patch=r).branch_geometry(k) == expected

    def test_fuse_is_sum_and_lengths(self):
        a, b = make_rng(12).normal(size=(2, 3, 2, 16))
        fused = C.fuse_class_vectors(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(fused, a + b)
        np.testing.assert_allclose(C.class_lengths(Tensor(fused)).data, np.linalg.norm(a + b, axis=-1), rtol=1e-14)
