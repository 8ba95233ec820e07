"""Force-vision-language Mixture-of-Experts fusion.

The wrench is projected to one token and appended to the visual-language
tokens; a self-attention encoder block mixes the sequence, a sparse top-k
MoE layer (residual, probability-weighted) refines every token, and a final
linear map brings the sequence to the action-expert width. The last ``H``
rows become additive guidance for the action suffix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, Init, Linear, Module, TransformerBlock
from .tensor import ShapeError, Tensor, as_tensor, concat, getitem, scatter_rows, softmax, take_rows

ROLE_VL = "vl"
ROLE_FORCE = "force"
WRENCH_DIM = 6


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 64
    d_act: int = 32
    n_heads: int = 4
    d_head: int = 16
    n_experts: int = 4
    top_k: int = 1
    mlp_expansion: int = 1
    h_action: int = 8
    load_balance_coef: float = 0.0

    def __post_init__(self):
        for k in ("d_model", "d_act", "n_heads", "d_head", "n_experts", "top_k",
                  "mlp_expansion", "h_action"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads*d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")

    @classmethod
    def full_scale(cls, h_action: int = 50) -> "FusionConfig":
        return cls(d_model=2048, d_act=1024, n_heads=8, d_head=256, n_experts=4, top_k=1,
                   mlp_expansion=1, h_action=h_action)


@dataclass
class TokenSequence:
    tokens: Tensor
    roles: list[str] = field(default_factory=list)


@dataclass
class RouterDecision:
    """Routing of T flattened tokens. ``selected``/``weight`` have a slot axis of size k."""

    gate_probs: Tensor  # (T, E)
    selected: np.ndarray  # (T, k) int
    weight: Tensor  # (T, k)
    logits: Tensor | None = None

    @property
    def top1(self) -> np.ndarray:
        return self.selected[:, 0]

    @property
    def top1_weight(self) -> np.ndarray:
        return self.weight.data[:, 0]


def build_fusion_input(e_vl: Tensor, e_f: Tensor) -> TokenSequence:
    """Append the force token after the VL tokens. Handles (N, d)/(d) or batched (B, N, d)/(B, d)."""
    e_vl, e_f = as_tensor(e_vl), as_tensor(e_f)
    if e_vl.shape[-1] != e_f.shape[-1]:
        raise ShapeError("build_fusion_input", e_vl.shape, e_f.shape, "token widths differ")
    if e_vl.ndim != e_f.ndim + 1:
        raise ShapeError("build_fusion_input", e_vl.shape, e_f.shape, "rank mismatch")
    n_vl = e_vl.shape[-2]
    f_tok = e_f.reshape(*e_f.shape[:-1], 1, e_f.shape[-1])
    tokens = concat([e_vl, f_tok], axis=-2)
    return TokenSequence(tokens, [ROLE_VL] * n_vl + [ROLE_FORCE])


def route_logits(logits: Tensor, top_k: int = 1) -> RouterDecision:
    """Softmax gate over experts, top-k selection with ties to the lowest index."""
    probs = softmax(logits)
    order = np.argsort(-probs.data, axis=-1, kind="stable")[:, :top_k]
    rows = np.arange(probs.shape[0])[:, None]
    weight = getitem(probs, (rows, order))
    return RouterDecision(probs, order, weight, logits)


def moe_combine(x: Tensor, decision: RouterDecision, experts: list) -> Tensor:
    """x + sum over selected slots of weight * Expert(x), token-wise on (T, d).

    An expert with at least one routed token is applied to the whole block and
    the routed rows are gathered afterwards. Running the same matmul shape for
    every expert keeps each token's result independent of how many other
    tokens share its expert (BLAS picks different kernels for one row and for
    many); gradients still reach an expert only through its routed rows.
    """
    n_tokens = x.shape[0]
    out = x
    for slot in range(decision.selected.shape[1]):
        parts, idxs = [], []
        w = decision.weight[:, slot]
        for e, expert in enumerate(experts):
            idx = np.nonzero(decision.selected[:, slot] == e)[0]
            if idx.size == 0:
                continue
            y = take_rows(expert(x), idx)
            parts.append(y * take_rows(w.reshape(n_tokens, 1), idx))
            idxs.append(idx)
        out = out + scatter_rows(parts, idxs, n_tokens)
    return out


def load_balancing_loss(decision: RouterDecision) -> Tensor:
    """Switch-style auxiliary loss E * sum_i frac_i * mean_prob_i (opt-in)."""
    n_exp = decision.gate_probs.shape[1]
    counts = np.bincount(decision.top1, minlength=n_exp) / decision.top1.size
    mean_prob = decision.gate_probs.mean(axis=0)
    return (mean_prob * counts).sum() * float(n_exp)


class SparseMoE(Module):
    """Router (d_model -> E) plus E independent MLP experts with a residual path."""

    def __init__(self, init: Init, name: str, d_model: int, n_experts: int, top_k: int = 1,
                 mlp_expansion: int = 1):
        self.router = Linear(init, f"{name}.router", d_model, n_experts)
        self.experts = [MLP(init, f"{name}.expert{i}", d_model, mlp_expansion * d_model, d_model)
                        for i in range(n_experts)]
        self.top_k = top_k

    def route(self, x: Tensor) -> RouterDecision:
        return route_logits(self.router(x), self.top_k)

    def __call__(self, x: Tensor) -> tuple[Tensor, RouterDecision]:
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        decision = self.route(flat)
        out = moe_combine(flat, decision, self.experts)
        return out.reshape(*lead, x.shape[-1]), decision


class FVLMoE(Module):
    def __init__(self, config: FusionConfig, init: Init, name: str = "fvlmoe"):
        c = config
        self.config = c
        self.force_proj = Linear(init, f"{name}.force_proj", WRENCH_DIM, c.d_model)
        self.encoder = TransformerBlock(init, f"{name}.encoder", c.d_model, c.n_heads, c.d_head,
                                        c.mlp_expansion)
        self.moe = SparseMoE(init, f"{name}.moe", c.d_model, c.n_experts, c.top_k, c.mlp_expansion)
        self.out_proj = Linear(init, f"{name}.out_proj", c.d_model, c.d_act)

    def project_force(self, f) -> Tensor:
        f = as_tensor(f)
        if f.shape[-1] != WRENCH_DIM:
            raise ShapeError("project_force", f.shape, (WRENCH_DIM,), "wrench must have 6 entries")
        if f.ndim == 1:
            return self.force_proj(f.reshape(1, WRENCH_DIM)).reshape(self.config.d_model)
        return self.force_proj(f)

    def encode(self, tokens: Tensor) -> Tensor:
        return self.encoder(tokens)

    def route(self, e_enc: Tensor) -> RouterDecision:
        return self.moe.route(e_enc.reshape(-1, e_enc.shape[-1]))

    def moe_layer(self, e_enc: Tensor, decision: RouterDecision) -> Tensor:
        flat = e_enc.reshape(-1, e_enc.shape[-1])
        return moe_combine(flat, decision, self.moe.experts).reshape(*e_enc.shape)

    def fuse(self, e_vl: Tensor, f) -> tuple[Tensor, RouterDecision, TokenSequence]:
        seq = build_fusion_input(e_vl, self.project_force(f))
        e_enc = self.encode(seq.tokens)
        decision = self.route(e_enc)
        fused = self.moe_layer(e_enc, decision)
        return self.out_proj(fused), decision, seq

    def __call__(self, e_vl: Tensor, f) -> tuple[Tensor, RouterDecision]:
        fused, decision, _ = self.fuse(e_vl, f)
        return fused, decision


def extract_guidance(fused: Tensor, h: int) -> Tensor:
    n = fused.shape[-2]
    if n < h:
        raise ValueError(
            f"fused sequence has {n} tokens but {h} guidance rows are needed; "
            f"increase the number of visual-language tokens to at least {h - 1}")
    return fused[..., n - h:, :]


def inject(suffix: Tensor, guidance: Tensor) -> Tensor:
    suffix, guidance = as_tensor(suffix), as_tensor(guidance)
    if suffix.shape != guidance.shape:
        raise ShapeError("inject", suffix.shape, guidance.shape)
    return suffix + guidance
