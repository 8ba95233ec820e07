"""One-dimensional bimodal imitation task for checking the flow head in isolation.

Instruction 0 demands action +1, instruction 1 demands -1; observations are
otherwise blank, so a model that collapses to the mean lands on 0 and fails.
"""
from __future__ import annotations

import numpy as np

from ..dataset.norm import NormStats
from ..fvlmoe import FusionConfig
from .config import PolicyConfig, PolicyVariant, TrainConfig
from .model import FlowPolicy, PolicyBatch
from .train import TrainingData, train

MODES = (1.0, -1.0)


def toy_config(seed: int = 0) -> PolicyConfig:
    fus = FusionConfig(d_model=16, d_act=16, n_heads=2, d_head=8, n_experts=2, h_action=1)
    return PolicyConfig(variant=PolicyVariant.NO_FORCE, fusion=fus, grid=4, patch=2,
                        n_instructions=2, encoder_blocks=1, suffix_heads=2, state_dim=1,
                        action_dim=1, seed=seed)


def blank_batch(instructions: np.ndarray, cfg: PolicyConfig) -> PolicyBatch:
    n = len(instructions)
    pp = cfg.patch * cfg.patch
    z = np.zeros((n, cfg.patches_per_view, pp))
    return PolicyBatch(z, z.copy(), np.zeros((n, cfg.state_dim)), np.zeros((n, 6)),
                       np.asarray(instructions, dtype=np.int64))


def _identity_norm(cfg: PolicyConfig) -> NormStats:
    s, a = cfg.state_dim, cfg.action_dim
    return NormStats(np.zeros(s), np.ones(s), np.zeros(6), np.ones(6), np.zeros(a), np.ones(a))


def bimodal_data(cfg: PolicyConfig, n: int = 256) -> TrainingData:
    instr = np.arange(n) % 2
    targets = np.array([MODES[i] for i in instr]).reshape(n, 1, 1)
    return TrainingData(blank_batch(instr, cfg), targets, _identity_norm(cfg))


def train_bimodal(steps: int = 1500, seed: int = 0, batch_size: int = 64):
    cfg = toy_config(seed)
    model = FlowPolicy(cfg)
    tcfg = TrainConfig(steps=steps, batch_size=batch_size, lr_peak=3e-3, lr_floor=1e-4, seed=seed)
    result = train(model, bimodal_data(cfg), tcfg)
    return model, result


def bimodal_accuracy(model: FlowPolicy, n: int = 1000, seed: int = 1, tol: float = 0.05):
    """Fraction of ``n`` samples within ``tol`` of the instructed mode, and the samples."""
    instr = np.arange(n) % 2
    a = model.sample_actions(blank_batch(instr, model.cfg), np.random.default_rng(seed))
    a = a[:, 0, 0]
    target = np.array([MODES[i] for i in instr])
    return float(np.mean(np.abs(a - target) <= tol)), a
