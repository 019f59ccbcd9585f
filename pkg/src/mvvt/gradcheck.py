"""Finite-difference verification of every differentiable op and of the full model.

Each check draws random double-precision points (values in [-2, 2]) and
compares backward's gradient against central differences. Ops are probed
through ``sum(op(inputs) * R)`` with a fixed random ``R`` so every output
coordinate contributes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .model import MvvtConfig, forward, init_params, mab_block, msa
from .tensor import RngStream, Tensor
from .train import mse_loss

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-12
EPS = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold


def _probe(op: Callable, shapes, rng: RngStream, eps: float = EPS) -> float:
    leaves = {f"x{i}": Tensor(rng.uniform(s) * 4.0 - 2.0, requires_grad=True) for i, s in enumerate(shapes)}
    args = list(leaves.values())
    out_shape = op(*args).shape
    weights = Tensor(rng.normal(out_shape))
    errs = T.grad_check_many(lambda: T.sum_(T.mul(op(*args), weights)), leaves, eps)
    return max(errs.values())


def _dropout(x):
    return T.dropout(x, 0.3, True, RngStream(7))


def _patchify(x, w, b):
    return T.patchify_project(x, w, b, 4)


def _mse(pred):
    return mse_loss(pred, Tensor(np.linspace(-1, 1, pred.data.size).reshape(pred.shape)))


OP_CASES = {
    "add": (T.add, [(2, 3, 4), (1, 3, 4)]),
    "sub": (T.sub, [(2, 3), (3,)]),
    "mul": (T.mul, [(2, 3), (2, 3)]),
    "scale": (lambda x: T.mul(x, 0.7), [(3, 4)]),
    "square": (T.square, [(3, 4)]),
    "matmul": (T.matmul, [(3, 4), (4, 5)]),
    "matmul_batched": (T.matmul, [(2, 3, 4), (2, 4, 5)]),
    "matmul_shared_rhs": (T.matmul, [(2, 3, 4), (4, 5)]),
    "softmax": (lambda x: T.softmax(x, -1), [(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b, 1e-5), [(3, 6), (6,), (6,)]),
    "relu": (T.relu, [(4, 5)]),
    "gelu": (T.gelu, [(4, 5)]),
    "dropout": (_dropout, [(4, 5)]),
    "mean": (lambda x: T.mean(x, 1), [(3, 4, 5)]),
    "sum": (lambda x: T.sum_(x, 0), [(3, 4)]),
    "reshape_transpose": (lambda x: T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)), [(2, 3, 4)]),
    "getitem": (lambda x: x[:, 1:3], [(3, 5)]),
    "concat": (lambda a, b: T.concat([a, b], -1), [(2, 3), (2, 2)]),
    "patchify_project": (_patchify, [(2, 3, 8, 8), (48, 5), (5,)]),
    "mse_loss": (_mse, [(4, 1)]),
}


def check_op(name: str, points: int = 20, seed: int = 0) -> CheckResult:
    op, shapes = OP_CASES[name]
    worst = 0.0
    for p in range(points):
        worst = max(worst, _probe(op, shapes, RngStream(seed, p)))
    return CheckResult(name, worst, GRAD_TOL)


# --- model-level checks ----------------------------------------------------

DESK = MvvtConfig(num_views=4, channels=3, height=32, width=32, patch=16, embed=32, layers=2,
                  heads=4, head_hidden=64, dropout=0.1, dtype="float64")

# Gradient w.r.t. the key bias is identically zero (softmax ignores a
# per-query constant shift), so it is checked in absolute terms instead.
STRUCTURAL_ZERO = (".attn.k.bias",)


def randomize(params: dict, rng: RngStream) -> None:
    """Move parameters to a generic random point (weights ~ N(0, 1/fan_in)).

    Query/key weights get half that scale so attention stays away from
    saturation, where true gradients fall below finite-difference resolution.
    """
    for name, p in params.items():
        if p.ndim == 2:
            scale = 0.5 if name.endswith(("q.weight", "k.weight")) else 1.0
            p.data = rng.normal(p.shape, scale / math.sqrt(p.shape[0]))
        elif name == "pos_enc":
            p.data = rng.normal(p.shape, 0.5)
        elif name.endswith(".gamma"):
            p.data = 1.0 + rng.normal(p.shape, 0.2)
        else:
            p.data = rng.normal(p.shape, 0.2)


def check_model(cfg: MvvtConfig = DESK, points: int = 20, seed: int = 0, name: str = "mvvt_loss") -> list:
    """Full training-mode loss (fixed dropout mask) checked tensor by tensor.

    Each parameter tensor is probed along a random direction rather than
    coordinate by coordinate: single coordinates can sit on a ReLU kink or in
    a saturated GELU tail where the true derivative is below the resolution
    of central differences.
    """
    worst, zero_worst = 0.0, 0.0
    for p in range(points):
        rng = RngStream(seed, 1000 + p)
        params = init_params(cfg, seed + p)
        randomize(params, rng)
        x = Tensor(rng.uniform((1, cfg.in_channels, cfg.height, cfg.width)) * 4.0 - 2.0)
        target = Tensor(rng.normal((1, cfg.output_dim)))

        def f():
            return mse_loss(forward(x, params, cfg, "train", RngStream(seed, 2000 + p)), target)

        checked = {k: v for k, v in params.items() if not k.endswith(STRUCTURAL_ZERO)}
        errs = T.grad_check_directional(f, checked, rng, EPS)
        worst = max(worst, max(errs.values()))
        for k, v in params.items():
            if k.endswith(STRUCTURAL_ZERO):
                zero_worst = max(zero_worst, float(np.max(np.abs(v.grad))))
    return [CheckResult(name, worst, GRAD_TOL), CheckResult(name + "_key_bias_zero", zero_worst, 1e-10)]


def check_block(points: int = 20, seed: int = 0) -> CheckResult:
    """One attention block at B=1, T=4, width=8."""
    cfg = MvvtConfig(num_views=1, height=32, width=32, patch=16, embed=8, layers=1, heads=2,
                     head_hidden=8, dropout=0.0, dtype="float64")
    worst = 0.0
    for p in range(points):
        rng = RngStream(seed, 3000 + p)
        params = init_params(cfg, p)
        randomize(params, rng)
        lp = params.layer(0)
        x = Tensor(rng.uniform((1, 4, 8)) * 4 - 2, requires_grad=True)
        weights = Tensor(rng.normal((1, 4, 8)))
        leaves = {"x": x, **{k: v for k, v in lp.items() if not k.endswith("k.bias")}}
        errs = T.grad_check_many(lambda: T.sum_(T.mul(mab_block(x, lp, cfg), weights)), leaves, EPS)
        worst = max(worst, max(errs.values()))
    return CheckResult("mab_block", worst, GRAD_TOL)


def naive_attention(x: np.ndarray, lp: dict, heads: int) -> np.ndarray:
    """Multi-head self-attention written out token by token."""
    b, t, w = x.shape
    d = w // heads
    W = {k: lp[k].data for k in lp}
    out = np.zeros((b, t, w))
    for bi in range(b):
        q = [x[bi, i] @ W["attn.q.weight"] + W["attn.q.bias"] for i in range(t)]
        k = [x[bi, i] @ W["attn.k.weight"] + W["attn.k.bias"] for i in range(t)]
        v = [x[bi, i] @ W["attn.v.weight"] + W["attn.v.bias"] for i in range(t)]
        for i in range(t):
            ctx = np.zeros(w)
            for h in range(heads):
                sl = slice(h * d, (h + 1) * d)
                s = np.array([np.dot(q[i][sl], k[j][sl]) / math.sqrt(d) for j in range(t)])
                e = np.exp(s - s.max())
                a = e / e.sum()
                for j in range(t):
                    ctx[sl] += a[j] * v[j][sl]
            out[bi, i] = ctx @ W["attn.o.weight"] + W["attn.o.bias"]
    return out


def random_attention_case(rng: RngStream) -> tuple:
    t = int(rng.integers(1, 9))
    heads = int(rng.choice(4, 1)[0]) + 1
    width = heads * int(rng.integers(1, 16 // heads + 1))
    cfg = MvvtConfig(num_views=1, height=16, width=16, patch=16, embed=width, layers=1, heads=heads,
                     head_hidden=4, dropout=0.0, dtype="float64")
    params = init_params(cfg, int(rng.integers(0, 2**31)))
    randomize(params, rng)
    x = rng.uniform((int(rng.integers(1, 3)), t, width)) * 4 - 2
    return cfg, params.layer(0), x


def check_msa_oracle(instances: int = 100, seed: int = 0) -> CheckResult:
    worst = 0.0
    for n in range(instances):
        cfg, lp, x = random_attention_case(RngStream(seed, 4000 + n))
        got = msa(Tensor(x), lp, cfg).data
        worst = max(worst, float(np.max(np.abs(got - naive_attention(x, lp, cfg.heads)))))
    return CheckResult("msa_oracle", worst, ORACLE_TOL)


def run_suite(points: int = 20, seed: int = 0) -> list:
    """Every op check, the block and full-model checks (both fusion modes) and the attention oracle."""
    results = [check_op(name, points, seed) for name in OP_CASES]
    results.append(check_block(points, seed))
    results.extend(check_model(DESK, points, seed=seed, name="mvvt_loss_fused"))
    pv = replace(DESK, fusion_mode="per-view-concat", embed=8)
    results.extend(check_model(pv, points, seed=seed, name="mvvt_loss_per_view"))
    results.append(check_msa_oracle(100, seed))
    return results


def format_results(results: list, elapsed: float = None) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} max_err={r.max_error:.3e}  (<= {r.threshold:.0e})" for r in results]
    if elapsed is not None:
        lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {elapsed:.1f}s")
    return "\n".join(lines)


def main_suite() -> tuple:
    start = time.perf_counter()
    results = run_suite()
    return results, time.perf_counter() - start
