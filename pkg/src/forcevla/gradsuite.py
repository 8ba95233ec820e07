"""Finite-difference suite over every tensor primitive and the end-to-end policy loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .fvlmoe import FVLMoE, FusionConfig, SparseMoE
from .nn import Init
from .tensor import Tensor, check_gradients

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _leaf(rng, *shape, positive: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _unary(op):
    def case(rng):
        x = _leaf(rng, 3, 4)
        w = rng.standard_normal((3, 4))
        return (lambda: T.tsum(op(x) * Tensor(w))), [x]
    return case


def _binary(op, sa=(3, 4), sb=(3, 4), positive_b=False):
    def case(rng):
        a, b = _leaf(rng, *sa), _leaf(rng, *sb, positive=positive_b)
        w = rng.standard_normal(np.broadcast_shapes(sa, sb))
        return (lambda: T.tsum(op(a, b) * Tensor(w))), [a, b]
    return case


def _with_probe(build):
    def case(rng):
        leaves, fn = build(rng)
        w_holder = {}

        def f():
            out = fn()
            if "w" not in w_holder:
                w_holder["w"] = Tensor(rng.standard_normal(out.shape))
            return T.tsum(out * w_holder["w"])
        return f, leaves
    return case


def _case_matmul_batched(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return [a, b], lambda: T.matmul(a, b)


def _case_matmul_bb(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 2)
    return [a, b], lambda: T.matmul(a, b)


def _case_reshape(rng):
    a = _leaf(rng, 2, 6)
    return [a], lambda: T.reshape(a, (3, 4))


def _case_transpose(rng):
    a = _leaf(rng, 2, 3, 4)
    return [a], lambda: T.transpose(a, (2, 0, 1))


def _case_swapaxes(rng):
    a = _leaf(rng, 2, 3, 4)
    return [a], lambda: T.swapaxes(a, -1, -2)


def _case_getitem(rng):
    a = _leaf(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    return [a], lambda: T.getitem(a, idx)


def _case_take_rows(rng):
    a = _leaf(rng, 6, 3)
    return [a], lambda: T.take_rows(a, np.array([5, 1, 1]))


def _case_scatter_rows(rng):
    p, q = _leaf(rng, 2, 3), _leaf(rng, 1, 3)
    return [p, q], lambda: T.scatter_rows([p, q], [np.array([0, 3]), np.array([2])], 5)


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 1)
    return [a, b], lambda: T.concat([a, b], axis=-1)


def _case_broadcast(rng):
    a = _leaf(rng, 1, 4)
    return [a], lambda: T.broadcast_to(a, (3, 4))


def _case_sum(rng):
    a = _leaf(rng, 3, 4)
    return [a], lambda: T.tsum(a, axis=0)


def _case_mean(rng):
    a = _leaf(rng, 3, 4)
    return [a], lambda: T.mean(a, axis=-1, keepdims=True)


def _case_softmax(rng):
    a = _leaf(rng, 3, 5)
    return [a], lambda: T.softmax(a)


def _case_layer_norm(rng):
    a, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    return [a, g, b], lambda: T.layer_norm(a, g, b)


def _case_linear(rng):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return [x, w, b], lambda: T.linear(x, w, b)


def _case_attention(rng):
    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 3)
    return [q, k, v], lambda: T.attention(q, k, v)


def _case_mse(rng):
    a = _leaf(rng, 3, 4)
    t = rng.standard_normal((3, 4))
    return (lambda: T.mse(a, t)), [a]


def _case_sparse_moe(rng):
    moe = SparseMoE(Init(int(rng.integers(1 << 30))), "moe", 8, 4)
    x = _leaf(rng, 6, 8)
    leaves = [x] + moe.parameters()
    return leaves, lambda: moe(x)[0]


def _case_fvlmoe(rng):
    cfg = FusionConfig(d_model=8, d_act=8, n_heads=2, d_head=4, n_experts=3, h_action=2)
    mod = FVLMoE(cfg, Init(int(rng.integers(1 << 30))))
    e_vl, f = _leaf(rng, 5, 8), _leaf(rng, 6)
    return [e_vl, f] + mod.parameters(), lambda: mod(e_vl, f)[0]


def _case_policy_loss(rng):
    """Flow-matching loss through a tiny FVLMoE policy, w.r.t. every parameter."""
    from .policy.config import PolicyConfig, PolicyVariant
    from .policy.model import FlowPolicy, PolicyBatch

    fus = FusionConfig(d_model=8, d_act=8, n_heads=2, d_head=4, n_experts=3, h_action=2)
    cfg = PolicyConfig(variant=PolicyVariant.FVLMOE, fusion=fus, grid=4, patch=2,
                       encoder_blocks=1, suffix_heads=2, state_dim=3, action_dim=2,
                       seed=int(rng.integers(1 << 30)))
    model = FlowPolicy(cfg)
    n = 2
    p = cfg.patch * cfg.patch
    batch = PolicyBatch(rng.uniform(size=(n, cfg.patches_per_view, p)),
                        rng.uniform(size=(n, cfg.patches_per_view, p)),
                        rng.standard_normal((n, cfg.state_dim)), rng.standard_normal((n, 6)),
                        rng.integers(0, cfg.n_instructions, size=n))
    a1 = rng.standard_normal((n, cfg.horizon, cfg.action_dim))
    a0 = rng.standard_normal((n, cfg.horizon, cfg.action_dim))
    tau = rng.uniform(size=n)
    return (lambda: model.fm_loss(batch, a1, tau, a0)), model.parameters()


PRIMITIVES: dict[str, Callable] = {
    "add": _binary(T.add, (3, 4), (4,)),
    "sub": _binary(T.sub, (3, 4), (3, 1)),
    "mul": _binary(T.mul, (3, 4), (1, 4)),
    "div": _binary(lambda a, b: a / b, positive_b=True),
    "reciprocal": _unary(lambda a: T.reciprocal(a * a + 1.0)),
    "exp": _unary(T.exp),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "swish": _unary(T.swish),
    "gelu": _unary(T.gelu),
    "matmul": _with_probe(_case_matmul_batched),
    "matmul_batched": _with_probe(_case_matmul_bb),
    "reshape": _with_probe(_case_reshape),
    "transpose": _with_probe(_case_transpose),
    "swapaxes": _with_probe(_case_swapaxes),
    "getitem": _with_probe(_case_getitem),
    "take_rows": _with_probe(_case_take_rows),
    "scatter_rows": _with_probe(_case_scatter_rows),
    "concat": _with_probe(_case_concat),
    "broadcast_to": _with_probe(_case_broadcast),
    "sum": _with_probe(_case_sum),
    "mean": _with_probe(_case_mean),
    "softmax": _with_probe(_case_softmax),
    "layer_norm": _with_probe(_case_layer_norm),
    "linear": _with_probe(_case_linear),
    "attention": _with_probe(_case_attention),
    "mse": _case_mse,
}

COMPOSITES: dict[str, Callable] = {
    "sparse_moe": _with_probe(_case_sparse_moe),
    "fvlmoe": _with_probe(_case_fvlmoe),
    "policy_flow_loss": _case_policy_loss,
}


def run_case(name: str, seed: int, max_entries: int | None = 24) -> CaseResult:
    build = {**PRIMITIVES, **COMPOSITES}[name]
    rng = np.random.default_rng([seed, len(name)])
    fn, leaves = build(rng)
    err = check_gradients(fn, leaves, h=1e-6, max_entries=max_entries, seed=seed)
    return CaseResult(name, seed, err)


def run_suite(seeds: Iterable[int] = range(20), names: Iterable[str] | None = None,
              max_entries: int | None = 24) -> tuple[list[CaseResult], float]:
    t0 = time.perf_counter()
    names = list(names) if names is not None else [*PRIMITIVES, *COMPOSITES]
    out = [run_case(n, s, max_entries) for n in names for s in seeds]
    return out, time.perf_counter() - t0


def summarize(results: list[CaseResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst
