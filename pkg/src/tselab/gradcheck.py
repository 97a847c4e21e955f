"""Finite-difference verification of every differentiable operation.

The checker weights an op's output with fixed random coefficients to obtain a
scalar, backpropagates, and compares each input gradient against central
finite differences (step 1e-5).  The error measure is
``|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`` so it is relative
for O(1) gradients and absolute (1e-6 at the default tolerance) for tiny ones.

``run_suite`` covers the tensor core plus the chunking and pooling operations
and a handful of structural invariants (softmax normalization, conv adjoint
identity, chunk/overlap-add round trip).  ``inject_bad_gradient`` is a test
hook that corrupts the analytic gradient of one named op so the harness's
failure path can itself be exercised.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tape, Tensor

_INJECT_BAD: str | None = None


@contextlib.contextmanager
def inject_bad_gradient(op_name: str):
    """Corrupt the analytic gradient of `op_name` inside this context."""
    global _INJECT_BAD
    _INJECT_BAD = op_name
    try:
        yield
    finally:
        _INJECT_BAD = None


@dataclass
class CheckResult:
    name: str
    instances: int
    max_err: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s}  {self.name:24s} n={self.instances:<3d} max_err={self.max_err:.3e}"


def _weighted_scalar(out: Tensor, weights: np.ndarray) -> Tensor:
    return tt.tsum(tt.mul(out, Tensor(weights)))


def check_op(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
             step: float = 1e-5, tol: float = 1e-4,
             op_name: str = "") -> float:
    """Max mixed abs/rel gradient error of `fn` at `arrays`. Raises nothing;
    caller compares against `tol`."""
    rng = np.random.default_rng(abs(hash(op_name)) % (2 ** 32))
    probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = _weighted_scalar(fn(*inputs), weights)
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    if _INJECT_BAD == op_name:
        analytic = [g * 1.5 + 1e-3 for g in analytic]

    def _scalar_at(arrs: list[np.ndarray]) -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * weights))

    max_err = 0.0
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] = flat[j] + step
            up = _scalar_at(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - step
            down = _scalar_at(bumped)
            numeric.reshape(-1)[j] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(numeric)), 1e-2)
        err = float(np.max(np.abs(analytic[i] - numeric) / denom))
        max_err = max(max_err, err)
    return max_err


def _away_from(x: np.ndarray, point: float, margin: float) -> np.ndarray:
    """Push samples at least `margin` away from a kink/domain edge."""
    return np.where(np.abs(x - point) < margin, x + np.sign(x - point + 1e-12) * margin, x)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, Callable]]:
    """(name, fn, sampler) triples; sampler draws one random input list."""

    def u(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape)

    return [
        ("add", tt.add, lambda: [u(3, 4), u(3, 4)]),
        ("add_scalar", tt.add, lambda: [u(3, 4), u(1)]),
        ("sub", tt.sub, lambda: [u(3, 4), u(3, 4)]),
        ("mul", tt.mul, lambda: [u(3, 4), u(3, 4)]),
        ("div", tt.div, lambda: [u(3, 4), _away_from(u(3, 4), 0.0, 0.3)]),
        ("scale", lambda a: tt.scale(a, -2.5), lambda: [u(4, 3)]),
        ("relu", tt.relu, lambda: [_away_from(u(5, 5), 0.0, 1e-3)]),
        ("exp", tt.exp, lambda: [u(3, 4)]),
        ("log", tt.log, lambda: [u(3, 4, lo=0.1, hi=2.0)]),
        ("sqrt", tt.sqrt, lambda: [u(3, 4, lo=0.1, hi=2.0)]),
        ("sigmoid", tt.sigmoid, lambda: [u(3, 4, lo=-4.0, hi=4.0)]),
        ("matmul", tt.matmul, lambda: [u(3, 4), u(4, 2)]),
        ("matmul_batched", tt.matmul, lambda: [u(2, 3, 4), u(2, 4, 2)]),
        ("softmax", lambda a: tt.softmax(a, axis=-1), lambda: [u(3, 5, lo=-2, hi=2)]),
        ("layernorm", lambda x, g, b: tt.layernorm(x, g, b, eps=1e-5),
         lambda: [u(4, 6), u(6, lo=0.5, hi=1.5), u(6)]),
        ("conv1d", lambda x, k: tt.conv1d(x, k, stride=2), lambda: [u(2, 20), u(3, 2, 4)]),
        ("conv1d_dilated", lambda x, k: tt.conv1d(x, k, stride=1, dilation=2),
         lambda: [u(2, 16), u(3, 2, 3)]),
        ("conv1d_transpose", lambda y, k: tt.conv1d_transpose(y, k, stride=2),
         lambda: [u(3, 6), u(3, 2, 4)]),
        ("sum", lambda a: tt.tsum(a, axis=0), lambda: [u(4, 3)]),
        ("mean", lambda a: tt.tmean(a, axis=1), lambda: [u(4, 3)]),
        ("transpose", lambda a: tt.transpose(a, (1, 0, 2)), lambda: [u(2, 3, 4)]),
        ("reshape", lambda a: tt.reshape(a, (6, 2)), lambda: [u(3, 4)]),
        ("concat", lambda a, b: tt.concat([a, b], axis=1), lambda: [u(3, 2), u(3, 4)]),
        ("expand", lambda a: tt.expand(a, (5, 4)), lambda: [u(1, 4)]),
    ]


def _extra_cases(rng: np.random.Generator) -> list[tuple[str, Callable, Callable]]:
    """Chunking and pooling ops from the higher-level modules."""
    from .embedder import gaussian_posterior_pool, stats_pool
    from .separator import chunk, overlap_add

    def u(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape)

    def chunk_fn(h: Tensor) -> Tensor:
        return chunk(h, chunk_len=4, hop=2).data

    def oa_fn(h: Tensor) -> Tensor:
        return overlap_add(chunk(h, chunk_len=4, hop=2))

    return [
        ("chunk", chunk_fn, lambda: [u(9, 3)]),
        ("overlap_add", oa_fn, lambda: [u(9, 3)]),
        ("stats_pool", stats_pool, lambda: [u(5, 3)]),
        ("gaussian_posterior_pool", gaussian_posterior_pool,
         lambda: [u(4, 3), u(4, 3, lo=-2.0, hi=2.0)]),
    ]


def run_op_checks(instances: int = 20, seed: int = 20260810,
                  tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, sampler in _op_cases(rng) + _extra_cases(rng):
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, check_op(fn, sampler(), op_name=name))
        results.append(CheckResult(name, instances, worst, worst < tol))
    return results


def run_invariant_checks(seed: int = 4) -> list[CheckResult]:
    """Non-gradient structural invariants."""
    from .separator import chunk, overlap_add

    rng = np.random.default_rng(seed)
    results = []

    # softmax rows sum to 1 and shift invariance
    x = rng.standard_normal((6, 7))
    s = tt.softmax(Tensor(x), axis=-1).data
    err = float(np.max(np.abs(s.sum(axis=-1) - 1.0)))
    shifted = tt.softmax(Tensor(x + 3.7), axis=-1).data
    err = max(err, float(np.max(np.abs(s - shifted))))
    results.append(CheckResult("softmax_normalized", 1, err, err < 1e-12))

    # conv adjoint identity <conv(x), y> == <x, conv_T(y)>; input length is
    # exactly (L'-1)*stride + kernel so the maps are true adjoints
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal((2, 16))
        k = rng.standard_normal((3, 2, 4))
        y = rng.standard_normal((3, 7))
        lhs = float(np.sum(tt.conv1d(Tensor(x), Tensor(k), stride=2).data * y))
        rhs = float(np.sum(x * tt.conv1d_transpose(Tensor(y), Tensor(k), stride=2).data))
        worst = max(worst, abs(lhs - rhs))
    results.append(CheckResult("conv_adjoint", 10, worst, worst < 1e-10))

    # chunk / overlap-add round trip for awkward lengths
    worst = 0.0
    for t_len in (3, 7, 8, 13, 50, 257):
        h = rng.standard_normal((t_len, 5))
        back = overlap_add(chunk(Tensor(h), chunk_len=8, hop=4)).data
        worst = max(worst, float(np.max(np.abs(back - h))))
    results.append(CheckResult("chunk_roundtrip", 6, worst, worst < 1e-12))

    # pooling permutation invariance
    from .embedder import gaussian_posterior_pool, stats_pool
    z = rng.standard_normal((7, 4))
    p = rng.standard_normal((7, 4))
    perm = rng.permutation(7)
    e1 = stats_pool(Tensor(z)).data
    e2 = stats_pool(Tensor(z[perm])).data
    err = float(np.max(np.abs(e1 - e2)))
    g1 = gaussian_posterior_pool(Tensor(z), Tensor(p)).data
    g2 = gaussian_posterior_pool(Tensor(z[perm]), Tensor(p[perm])).data
    err = max(err, float(np.max(np.abs(g1 - g2))))
    results.append(CheckResult("pool_permutation", 2, err, err < 1e-12))

    return results


def run_suite(instances: int = 20, seed: int = 20260810,
              tol: float = 1e-4) -> tuple[list[CheckResult], float]:
    """Full gradient + invariant suite; returns (results, elapsed seconds)."""
    start = time.perf_counter()
    results = run_op_checks(instances=instances, seed=seed, tol=tol)
    results += run_invariant_checks()
    return results, time.perf_counter() - start
