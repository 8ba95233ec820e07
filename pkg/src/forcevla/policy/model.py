"""Flow-matching action policy with switchable force-fusion wiring.

The context encoder is a small from-scratch transformer over patchified
camera grids plus an instruction token. The action suffix embeds the state
and the noisy action chunk (with the flow time), lets those tokens attend to
the context, and an output projection turns the action positions into a
velocity. Each ``PolicyVariant`` differs only in where the wrench enters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..fvlmoe import (FVLMoE, ROLE_FORCE, ROLE_VL, RouterDecision, SparseMoE, extract_guidance,
                      inject)
from ..nn import (MLP, Init, LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock,
                  sinusoidal_embedding)
from ..sim.env import Observation
from ..tensor import ShapeError, Tensor, concat, getitem, mse, no_grad
from .config import ConfigError, PolicyConfig, PolicyVariant

WRENCH_DIM = 6


def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    """(B, G, G) -> (B, (G/p)^2, p*p), patches in row-major order."""
    b, g, g2 = grids.shape
    if g != g2 or g % patch:
        raise ConfigError(f"grid {g}x{g2} is not divisible into {patch}x{patch} patches")
    n = g // patch
    x = grids.reshape(b, n, patch, n, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, n * n, patch * patch)


@dataclass
class PolicyBatch:
    """Model-ready (normalized) inputs for B observations."""

    base: np.ndarray  # (B, P, p*p)
    wrist: np.ndarray
    state: np.ndarray  # (B, state_dim)
    wrench: np.ndarray  # (B, 6)
    instruction: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return self.state.shape[0]

    def take(self, idx) -> "PolicyBatch":
        return PolicyBatch(self.base[idx], self.wrist[idx], self.state[idx], self.wrench[idx],
                           self.instruction[idx])


@dataclass
class ContextEmbedding:
    e_vl: Tensor  # (B, N_VL, d_model)
    instruction: np.ndarray
    decision: RouterDecision | None = None

    @property
    def n_vl(self) -> int:
        return self.e_vl.shape[-2]


@dataclass
class Conditioning:
    """Everything that is fixed across the denoising steps of one chunk."""

    context: ContextEmbedding
    keys: Tensor  # context projected to the action width
    state_in: Tensor
    guidance: Tensor | None
    decision: RouterDecision | None
    roles: list[str] | None


class ContextEncoder(Module):
    def __init__(self, cfg: PolicyConfig, init: Init, name: str = "vlm"):
        d = cfg.d_model
        pp = cfg.patch * cfg.patch
        self.cfg = cfg
        self.base_proj = Linear(init, f"{name}.base_proj", pp, d)
        self.wrist_proj = Linear(init, f"{name}.wrist_proj", pp, d)
        self.instr_embed = init.normal(f"{name}.instr_embed", (cfg.n_instructions, d), 0.5)
        self.pos_embed = init.normal(f"{name}.pos_embed.{cfg.n_vl}", (cfg.n_vl, d), 0.1)
        self.blocks = [TransformerBlock(init, f"{name}.block{i}", d, cfg.fusion.n_heads,
                                        cfg.fusion.d_head, cfg.encoder_mlp_expansion)
                       for i in range(cfg.encoder_blocks)]
        self.ln_out = LayerNorm(init, f"{name}.ln_out", d)
        v = cfg.variant
        self.force_in = None
        self.pre_moe = None
        if v in (PolicyVariant.LINEAR_BEFORE_VLM, PolicyVariant.MOE_BEFORE_VLM):
            self.force_in = Linear(init, f"{name}.force_in", WRENCH_DIM, d)
        if v is PolicyVariant.MOE_BEFORE_VLM:
            f = cfg.fusion
            self.pre_moe = SparseMoE(init, f"{name}.pre_moe", d, f.n_experts, f.top_k,
                                     f.mlp_expansion)

    def input_tokens(self, batch: PolicyBatch) -> Tensor:
        """Token sequence before any transformer block (positions not yet added)."""
        toks = [self.base_proj(Tensor(batch.base)), self.wrist_proj(Tensor(batch.wrist))]
        instr = getitem(self.instr_embed, np.asarray(batch.instruction, dtype=np.int64))
        toks.append(instr.reshape(len(batch), 1, self.cfg.d_model))
        if self.force_in is not None:
            f = self.force_in(Tensor(batch.wrench)).reshape(len(batch), 1, self.cfg.d_model)
            toks.insert(0, f)
        return concat(toks, axis=1)

    def roles(self) -> list[str]:
        r = [ROLE_VL] * (self.cfg.n_views * self.cfg.patches_per_view + 1)
        if self.force_in is not None:
            r.insert(0, ROLE_FORCE)
        return r

    def __call__(self, batch: PolicyBatch) -> ContextEmbedding:
        x = self.input_tokens(batch) + self.pos_embed
        decision = None
        if self.pre_moe is not None:
            x, decision = self.pre_moe(x)
        for blk in self.blocks:
            x = blk(x)
        return ContextEmbedding(self.ln_out(x), batch.instruction, decision)


class ActionSuffix(Module):
    """State token + per-step action/time tokens, one joint attention block."""

    def __init__(self, cfg: PolicyConfig, init: Init, state_in: int, name: str = "suffix"):
        da = cfg.d_act
        self.cfg = cfg
        self.state_proj = Linear(init, f"{name}.state_proj", state_in, da)
        self.action_proj = Linear(init, f"{name}.action_proj", cfg.action_dim, da)
        self.action_time_mlp = MLP(init, f"{name}.action_time_mlp", 2 * da, da, da,
                                   activation="swish")
        self.ctx_proj = Linear(init, f"{name}.ctx_proj", cfg.d_model, da)
        self.ln1 = LayerNorm(init, f"{name}.ln1", da)
        self.attn = MultiHeadAttention(init, f"{name}.attn", da, cfg.suffix_heads)
        self.ln2 = LayerNorm(init, f"{name}.ln2", da)
        self.mlp = MLP(init, f"{name}.mlp", da, cfg.suffix_mlp_expansion * da, da)

    def time_embedding(self, tau: np.ndarray, horizon: int) -> np.ndarray:
        emb = sinusoidal_embedding(np.asarray(tau, dtype=np.float64), self.cfg.d_act)
        return np.broadcast_to(emb[:, None, :], (emb.shape[0], horizon, emb.shape[1]))

    def action_tokens(self, a_tau: Tensor, tau: np.ndarray) -> Tensor:
        h = a_tau.shape[1]
        t_emb = Tensor(np.ascontiguousarray(self.time_embedding(tau, h)))
        return self.action_time_mlp(concat([self.action_proj(a_tau), t_emb], axis=-1))

    def __call__(self, keys: Tensor, state_in: Tensor, a_tau: Tensor, tau: np.ndarray) -> Tensor:
        b = a_tau.shape[0]
        s_tok = self.state_proj(state_in).reshape(b, 1, self.cfg.d_act)
        x = concat([s_tok, self.action_tokens(a_tau, tau)], axis=1)
        hx = self.ln1(x)
        x = x + self.attn(hx, concat([keys, hx], axis=1))
        x = x + self.mlp(self.ln2(x))
        return x[:, 1:, :]


class ConcatLinearFusion(Module):
    """Force token appended to the context; each row is fused linearly with it."""

    def __init__(self, cfg: PolicyConfig, init: Init, name: str = "concat_fusion"):
        self.force_proj = Linear(init, f"{name}.force_proj", WRENCH_DIM, cfg.d_model)
        self.token_proj = Linear(init, f"{name}.token_proj", cfg.d_model, cfg.d_act)
        self.force_mix = Linear(init, f"{name}.force_mix", cfg.d_model, cfg.d_act, bias=False)

    def __call__(self, e_vl: Tensor, wrench: Tensor) -> Tensor:
        b, _, d = e_vl.shape
        e_f = self.force_proj(wrench)
        seq = concat([e_vl, e_f.reshape(b, 1, d)], axis=1)
        return self.token_proj(seq) + self.force_mix(e_f).reshape(b, 1, -1)


class FlowPolicy(Module):
    def __init__(self, cfg: PolicyConfig, init: Init | None = None):
        init = init or Init(cfg.seed)
        self.cfg = cfg
        v = cfg.variant
        self.vlm = ContextEncoder(cfg, init)
        state_in = cfg.state_dim + (WRENCH_DIM if v is PolicyVariant.FORCE_CONCAT_STATE else 0)
        self.suffix = ActionSuffix(cfg, init, state_in)
        self.out_proj = Linear(init, "action_out_proj", cfg.d_act, cfg.action_dim)
        self.fvlmoe = FVLMoE(cfg.fusion, init) if v is PolicyVariant.FVLMOE else None
        self.concat_fusion = ConcatLinearFusion(cfg, init) if v is PolicyVariant.CONCAT_AFTER_VLM else None

    @property
    def variant(self) -> PolicyVariant:
        return self.cfg.variant

    def fusion_parameters(self) -> list[Tensor]:
        mods = [m for m in (self.fvlmoe, self.concat_fusion) if m is not None]
        return [p for m in mods for p in m.parameters()]

    # -- stages -----------------------------------------------------------------
    def encode_context(self, batch: PolicyBatch) -> ContextEmbedding:
        return self.vlm(batch)

    def condition(self, batch: PolicyBatch, context: ContextEmbedding | None = None) -> Conditioning:
        context = context or self.encode_context(batch)
        v = self.variant
        state = Tensor(batch.state)
        if v is PolicyVariant.FORCE_CONCAT_STATE:
            state = concat([state, Tensor(batch.wrench)], axis=-1)
        guidance, decision, roles = None, context.decision, None
        if context.decision is not None:
            roles = self.vlm.roles()
        if v is PolicyVariant.FVLMOE:
            fused, decision, seq = self.fvlmoe.fuse(context.e_vl, Tensor(batch.wrench))
            guidance = extract_guidance(fused, self.cfg.horizon)
            roles = seq.roles
        elif v is PolicyVariant.CONCAT_AFTER_VLM:
            fused = self.concat_fusion(context.e_vl, Tensor(batch.wrench))
            guidance = extract_guidance(fused, self.cfg.horizon)
        keys = self.suffix.ctx_proj(context.e_vl)
        return Conditioning(context, keys, state, guidance, decision, roles)

    def build_suffix(self, cond: Conditioning, a_tau: Tensor, tau: np.ndarray) -> Tensor:
        return self.suffix(cond.keys, cond.state_in, a_tau, tau)

    def velocity(self, cond: Conditioning, a_tau, tau) -> Tensor:
        a_tau = a_tau if isinstance(a_tau, Tensor) else Tensor(np.asarray(a_tau))
        if a_tau.shape[1:] != (self.cfg.horizon, self.cfg.action_dim):
            raise ShapeError("velocity", a_tau.shape[1:], (self.cfg.horizon, self.cfg.action_dim),
                             "noisy chunk shape")
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (a_tau.shape[0],))
        s = self.build_suffix(cond, a_tau, tau)
        if cond.guidance is not None:
            s = inject(s, cond.guidance)
        return self.out_proj(s)

    def predict_velocity(self, batch: PolicyBatch, a_tau, tau) -> Tensor:
        return self.velocity(self.condition(batch), a_tau, tau)

    # -- objectives ---------------------------------------------------------------
    def fm_loss(self, batch: PolicyBatch, a1: np.ndarray, tau: np.ndarray, a0: np.ndarray,
                aux_coef: float = 0.0) -> Tensor:
        """Conditional flow-matching MSE for given interpolation times and noise."""
        if a1.shape[1:] != (self.cfg.horizon, self.cfg.action_dim):
            raise ShapeError("fm_loss", a1.shape[1:], (self.cfg.horizon, self.cfg.action_dim),
                             "target chunk horizon/width")
        t = np.asarray(tau, dtype=np.float64).reshape(-1, 1, 1)
        a_tau = t * a1 + (1.0 - t) * a0
        cond = self.condition(batch)
        v = self.velocity(cond, Tensor(a_tau), np.ravel(tau))
        loss = mse(v, Tensor(a1 - a0))
        if aux_coef and cond.decision is not None:
            from ..fvlmoe import load_balancing_loss
            loss = loss + load_balancing_loss(cond.decision) * aux_coef
        return loss

    def sample_actions(self, batch: PolicyBatch, rng: np.random.Generator,
                       n_steps: int | None = None, a0: np.ndarray | None = None,
                       return_conditioning: bool = False):
        """Euler-integrate the velocity field from Gaussian noise over tau in [0, 1]."""
        n_steps = n_steps or self.cfg.n_flow_steps
        with no_grad():
            cond = self.condition(batch)
            if a0 is None:
                a0 = rng.standard_normal((len(batch), self.cfg.horizon, self.cfg.action_dim))
            a = np.array(a0, dtype=np.float64)
            dt = 1.0 / n_steps
            for k in range(n_steps):
                a = a + dt * self.velocity(cond, Tensor(a), k * dt).data
        return (a, cond) if return_conditioning else a


def batch_from_observations(observations: Sequence[Observation], cfg: PolicyConfig,
                            norm=None) -> PolicyBatch:
    base = np.stack([o.base_view for o in observations])
    wrist = np.stack([o.wrist_view for o in observations])
    state = np.stack([np.asarray(o.state)[:cfg.state_dim] for o in observations])
    wrench = np.stack([np.asarray(o.wrench)[:WRENCH_DIM] for o in observations])
    if norm is not None:
        state = norm.normalize("state", state)
        wrench = norm.normalize("wrench", wrench)
    instr = np.array([o.instruction for o in observations], dtype=np.int64)
    return PolicyBatch(patchify(base, cfg.patch), patchify(wrist, cfg.patch), state, wrench, instr)
