import numpy as np
import pytest

from mscaps.afc import DILATIONS, afc_branch, afc_forward, channel_attention, init_afc_params
from mscaps.conv import conv2d_reference
from mscaps.rng import make_rng
from mscaps.tensor import Tensor, TensorError


def _params(seed=0, **kw):
    return init_afc_params(make_rng(seed, "init"), **kw)


def _branch_oracle(patch, params, branch):
    """Plain NumPy re-derivation of one branch."""
    w = params[f"afc.conv{branch}.w"].data
    b = params[f"afc.conv{branch}.b"].data
    h = np.maximum(conv2d_reference(patch, w, b, DILATIONS[branch - 1], "same"), 0.0)
    pooled = h.mean(axis=(0, 1))
    k = params[f"afc.att{branch}"].data
    padded = np.concatenate([np.zeros(1), pooled, np.zeros(1)])
    att = np.array([sum(k[j] * padded[c + j] for j in range(3)) for c in range(pooled.size)])
    weights = 1.0 / (1.0 + np.exp(-att))
    return (h * weights) @ params[f"afc.match{branch}.w"].data


class TestAFC:
    def test_zero_input_gives_zero_output(self):
        out = afc_forward(Tensor(np.zeros((9, 9, 1))), _params())
        np.testing.assert_array_equal(out.data, 0.0)

    @pytest.mark.parametrize("r", [5, 7, 9, 17])
    def test_spatial_size_preserved(self, r):
        out = afc_forward(Tensor(make_rng(r).random((r, r, 1))), _params(c0=8, c_fuse=6))
        assert out.shape == (r, r, 6)

    def test_batched(self):
        x = make_rng(1).random((3, 9, 9, 1))
        params = _params(c0=8, c_fuse=8)
        batched = afc_forward(Tensor(x), params).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], afc_forward(Tensor(x[i]), params).data, rtol=0, atol=1e-13)

    def test_sum_of_branches(self):
        x = Tensor(make_rng(2).random((9, 9, 1)))
        params = _params(c0=8, c_fuse=4)
        total = sum(afc_branch(x, params, i).data for i in (1, 2, 3))
        np.testing.assert_allclose(afc_forward(x, params).data, total, rtol=0, atol=1e-13)

    def test_single_branch_when_others_silenced(self):
        x = Tensor(make_rng(3).random((9, 9, 1)))
        params = _params(c0=8, c_fuse=4)
        for i in (2, 3):
            params[f"afc.match{i}.w"] = Tensor(np.zeros_like(params[f"afc.match{i}.w"].data))
        np.testing.assert_allclose(afc_forward(x, params).data, afc_branch(x, params, 1).data, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("branch", [1, 2, 3])
    def test_branch_matches_numpy_oracle(self, branch):
        x = make_rng(4).random((9, 9, 1))
        params = _params(5, c0=6, c_fuse=5)
        params[f"afc.conv{branch}.b"] = Tensor(make_rng(6).normal(size=6))
        np.testing.assert_allclose(afc_branch(Tensor(x), params, branch).data, _branch_oracle(x, params, branch), rtol=0, atol=1e-12)

    def test_attention_factors_in_unit_interval(self):
        h = Tensor(make_rng(7).random((5, 5, 16)) + 0.1)
        out = channel_attention(h, Tensor(make_rng(8).normal(size=3) * 5)).data
        ratio = out / h.data
        assert (ratio > 0).all() and (ratio < 1).all()
        # one factor per channel
        np.testing.assert_allclose(ratio, ratio[:1, :1, :].repeat(5, 0).repeat(5, 1), rtol=1e-12)

    def test_shared_attention_has_one_kernel(self):
        params = _params(shared_attention=True)
        assert "afc.att" in params and "afc.att1" not in params
        out = afc_forward(Tensor(make_rng(9).random((7, 7, 1))), params)
        assert out.shape == (7, 7, 32)

    def test_parameter_names(self):
        names = set(_params())
        for i in (1, 2, 3):
            assert {f"afc.conv{i}.w", f"afc.conv{i}.b", f"afc.att{i}", f"afc.match{i}.w"} <= names

    def test_small_patch_rejected(self):
        with pytest.raises(TensorError):
            afc_forward(Tensor(np.zeros((3, 3, 1))), _params())
