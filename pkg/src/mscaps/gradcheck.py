"""Central finite-difference checks for every differentiable op and the full network.

Each check reduces an op's output to a scalar with a fixed random projection,
then compares the tape gradient against ``(f(x+eps) - f(x-eps)) / 2eps`` on
every input coordinate (or a random subset for large parameter tensors). The
error reported is ``|analytic - numeric| / max(|analytic|, |numeric|)`` over the
vector of checked coordinates.

A coordinate whose +/-eps stencil flips the sign pattern of any ReLU or hinge
input straddles a point where the function is not differentiable; such
coordinates are skipped and counted rather than compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import afc, capsules, conv, loss, model
from . import tensor as T
from .rng import make_rng
from .tensor import Tensor

FD_EPS = 1e-5
OP_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3

Builder = Callable[[Sequence[Tensor]], Tensor]


@dataclass(frozen=True)
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    coords: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.coords > 0 and self.rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        skip = f" kink_skipped={self.skipped}" if self.skipped else ""
        return f"{status} {self.name:<32} rel_err={self.rel_error:.3e} tol={self.tolerance:.0e} coords={self.coords}{skip}"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def kink_signature(out: Tensor) -> list[np.ndarray]:
    """Sign masks of every ReLU input on the recorded graph, in tape order."""
    seen, stack, relus = set(), [out], []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._op == "relu":
            relus.append(node)
        stack.extend(node._parents)
    relus.sort(key=lambda n: n._id)
    return [n._parents[0].data > 0 for n in relus]


def _same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe(fn: Builder, inputs: Sequence[np.ndarray], k: int, idx, delta: float) -> tuple[float, list[np.ndarray]]:
    probe = [a.copy() for a in inputs]
    probe[k][idx] += delta
    out = fn([Tensor(a, requires_grad=True) for a in probe])
    return out.item(), kink_signature(out)


def _compare(
    fn: Builder, inputs: Sequence[np.ndarray], grads: Sequence[np.ndarray], coords: Sequence[tuple[int, tuple]], eps: float
) -> tuple[np.ndarray, np.ndarray, int]:
    base = kink_signature(fn([Tensor(a, requires_grad=True) for a in inputs]))
    analytic, numeric, skipped = [], [], 0
    for k, idx in coords:
        plus, sig_plus = _probe(fn, inputs, k, idx, eps)
        minus, sig_minus = _probe(fn, inputs, k, idx, -eps)
        if not (_same_kinks(base, sig_plus) and _same_kinks(base, sig_minus)):
            skipped += 1
            continue
        numeric.append((plus - minus) / (2.0 * eps))
        analytic.append(grads[k][idx])
    return np.array(analytic), np.array(numeric), skipped


def check_gradient(
    name: str,
    fn: Builder,
    inputs: Sequence[np.ndarray],
    tolerance: float = OP_TOLERANCE,
    eps: float = FD_EPS,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    fn(leaves).backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(x) for t, x in zip(leaves, inputs)]
    coords = []
    for k, x in enumerate(inputs):
        flat = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            flat = np.sort((rng or make_rng(0, "gradcheck")).choice(x.size, max_coords, replace=False))
        coords.extend((k, np.unravel_index(f, x.shape)) for f in flat)
    a, n, skipped = _compare(fn, inputs, grads, coords, eps)
    return CheckResult(name, relative_error(a, n), tolerance, len(a), skipped)


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def op_checks(rng: np.random.Generator) -> list[tuple[str, Builder, list[np.ndarray]]]:
    """(name, builder, inputs) for every primitive op, inputs drawn from ``rng``."""
    r = rng
    checks: list[tuple[str, Builder, list[np.ndarray]]] = []

    def add(name, build, *inputs):
        proj = Tensor(r.normal(size=build([Tensor(x) for x in inputs]).shape))
        checks.append((name, lambda ts, b=build, p=proj: T.sum(T.mul(b(ts), p)), list(inputs)))

    add("add", lambda t: T.add(t[0], t[1]), r.normal(size=(3, 4)), r.normal(size=(3, 4)))
    add("sub", lambda t: T.sub(t[0], t[1]), r.normal(size=(3, 4)), r.normal(size=(3, 4)))
    add("mul", lambda t: T.mul(t[0], t[1]), r.normal(size=(3, 4)), r.normal(size=(3, 4)))
    add("scalar_mul", lambda t: T.scalar_mul(t[0], -1.7), r.normal(size=(5,)))
    add("add_scalar", lambda t: T.add_scalar(t[0], 0.3), r.normal(size=(5,)))
    add("square", lambda t: T.square(t[0]), r.normal(size=(2, 3)))
    add("sigmoid", lambda t: T.sigmoid(t[0]), 3.0 * r.normal(size=(4, 3)))
    add("relu", lambda t: T.relu(t[0]), _away_from_zero(r, (4, 5)))
    add("channel_broadcast_mul", lambda t: T.channel_broadcast_mul(t[0], t[1]), r.normal(size=(3, 3, 2)), r.normal(size=(1, 1, 2)))
    add("sum_axis", lambda t: T.sum(t[0], axis=1), r.normal(size=(2, 3, 4)))
    add("mean", lambda t: T.mean(t[0], axis=(0, 2), keepdims=True), r.normal(size=(2, 3, 4)))
    add("reshape", lambda t: T.reshape(t[0], (6, 4)), r.normal(size=(2, 3, 4)))
    add("transpose", lambda t: T.transpose(t[0], (2, 0, 1)), r.normal(size=(2, 3, 4)))
    add("einsum", lambda t: T.einsum("bij,bijd->bjd", t[0], t[1]), r.normal(size=(2, 3, 2)), r.normal(size=(2, 3, 2, 4)))
    add("softmax", lambda t: T.softmax(t[0], axis=-1), r.normal(size=(3, 4)))
    for dil in (1, 2, 3):
        add(
            f"conv2d_same_d{dil}",
            lambda t, d=dil: conv.conv2d(t[0], t[1], t[2], d, "same"),
            r.normal(size=(7, 7, 2)),
            r.normal(size=(3, 3, 2, 3)),
            r.normal(size=(3,)),
        )
    add("conv2d_valid_k5_batched", lambda t: conv.conv2d(t[0], t[1], t[2], 1, "valid"), r.normal(size=(2, 6, 6, 2)), r.normal(size=(5, 5, 2, 2)), r.normal(size=(2,)))
    add("conv1x1", lambda t: conv.conv1x1(t[0], t[1], t[2]), r.normal(size=(4, 4, 3)), r.normal(size=(3, 2)), r.normal(size=(2,)))
    add("global_avg_pool", lambda t: conv.global_avg_pool(t[0]), r.normal(size=(5, 4, 3)))
    add("conv1d_channels", lambda t: conv.conv1d_channels(t[0], t[1]), r.normal(size=(2, 1, 1, 6)), r.normal(size=(3,)))
    add("squash", lambda t: capsules.squash(t[0]), r.normal(size=(4, 8)))
    add("squash_small", lambda t: capsules.squash(t[0]), 1e-3 * r.normal(size=(3, 8)))
    add("vector_norm", lambda t: capsules.vector_norm(t[0]), r.normal(size=(3, 5)))
    add("capsule_transform", lambda t: capsules.capsule_transform(t[0], t[1]), r.normal(size=(2, 3, 4)), r.normal(size=(3, 4, 5)))
    add("unfold_grid", lambda t: capsules.unfold_grid(t[0], 3), r.normal(size=(1, 5, 5, 2, 3)))
    add("route_full", lambda t: capsules.route(t[0], 3, "full")[0], r.normal(size=(2, 5, 3, 4)))
    add("primary_capsules", lambda t: capsules.primary_capsules(t[0], t[1], t[2]), r.normal(size=(1, 5, 5, 2)), 0.5 * r.normal(size=(3, 3, 2, 16)), r.normal(size=(16,)))
    add("conv_capsule_full", lambda t: capsules.conv_capsule(t[0], t[1], 3, "full")[0], 0.5 * r.normal(size=(1, 4, 4, 2, 4)), r.normal(size=(3, 3, 2, 2, 4, 4)))
    add("class_capsules_full", lambda t: capsules.class_capsules(t[0], t[1], 3, "full")[0], 0.5 * r.normal(size=(2, 2, 2, 2, 4)), 0.5 * r.normal(size=(8, 2, 6, 4)))
    add("channel_attention", lambda t: afc.channel_attention(t[0], t[1]), r.normal(size=(4, 4, 5)), r.normal(size=(3,)))

    # hinges kept away from their kinks at m+ = 0.9 and m- = 0.1
    lengths = np.array([[0.5, 0.3], [0.95, 0.05], [0.2, 0.7]])
    labels = np.array([0, 1, 1])
    checks.append(("margin_loss", lambda t: loss.margin_loss_from_lengths(t[0], labels), [lengths]))
    vectors = r.normal(size=(3, 2, 16)) * 0.15
    checks.append(("margin_loss_vectors", lambda t: loss.margin_loss(t[0], labels), [vectors]))
    return checks


def afc_check(rng: np.random.Generator) -> tuple[str, Builder, list[np.ndarray]]:
    params = afc.init_afc_params(rng, c_in=1, c0=4, c_fuse=4, k1d=3)
    names = list(params)
    patch = rng.random((1, 7, 7, 1))
    proj = Tensor(rng.normal(size=(1, 7, 7, 4)))

    def build(ts):
        return T.sum(T.mul(afc.afc_forward(ts[0], dict(zip(names, ts[1:]))), proj))

    return "afc_forward", build, [patch] + [params[k].data for k in names]


def composite_check(
    rng: np.random.Generator, variant: str = "full", patch: int = 9, coords_per_tensor: int = 4, tolerance: float = COMPOSITE_TOLERANCE
) -> CheckResult:
    """Patch -> AFC -> both capsule scales -> margin loss, with fully differentiated routing."""
    net = model.NetConfig(variant=variant, patch=patch, route_grad="full", weight_range=0.5)
    params = model.init_params(net, rng)
    names = list(params)
    x = rng.random((2, patch, patch, 1))
    labels = np.array([0, 1])

    def build(ts):
        out = model.forward(ts[0], net, dict(zip(names, ts[1:])))
        return loss.margin_loss(out, labels)

    inputs = [x] + [params[k].data for k in names]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    build(leaves).backward()
    coords = []
    for k, arr in enumerate(inputs):
        picks = np.sort(rng.choice(arr.size, min(coords_per_tensor, arr.size), replace=False))
        coords.extend((k, np.unravel_index(f, arr.shape)) for f in picks)
    a, n, skipped = _compare(build, inputs, [t.grad for t in leaves], coords, FD_EPS)
    return CheckResult(f"network_{variant}_r{patch}", relative_error(a, n), tolerance, len(a), skipped)


def run_suite(seed: int = 0, tolerance: float = OP_TOLERANCE, composite_tolerance: float | None = None) -> list[CheckResult]:
    """Every op check plus the AFC and whole-network composites for one seed."""
    composite_tolerance = 10.0 * tolerance if composite_tolerance is None else composite_tolerance
    rng = make_rng(seed, "gradcheck")
    results = [check_gradient(name, fn, inputs, tolerance) for name, fn, inputs in op_checks(rng)]
    name, fn, inputs = afc_check(rng)
    results.append(check_gradient(name, fn, inputs, tolerance, max_coords=24, rng=rng))
    results.append(composite_check(rng, tolerance=composite_tolerance))
    return results
