"""Training loop, checkpoint packaging and a closed-loop runner for evaluation."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..dataset.episode import Episode, format_kv, parse_kv
from ..dataset.norm import NormStats, compute_norm_stats
from ..dataset.store import chunk
from ..nn import Init
from ..tensor import Adam, LRSchedule, NonFiniteGradient, decode_checkpoint, encode_checkpoint
from .config import PolicyConfig, PolicyVariant, TrainConfig
from .model import FlowPolicy, PolicyBatch, batch_from_observations

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "lr", "grad_norm")


class NumericalFailure(FloatingPointError):
    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {detail}")


@dataclass
class TrainingData:
    batch: PolicyBatch
    chunks: np.ndarray  # (N, H, action_dim), normalized
    norm: NormStats

    def __len__(self) -> int:
        return self.chunks.shape[0]

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], cfg: PolicyConfig,
                      norm: NormStats | None = None) -> "TrainingData":
        norm = norm or compute_norm_stats(episodes)
        obs, chunks = [], []
        for ep in episodes:
            for o, c in chunk(ep, cfg.horizon):
                obs.append(o)
                chunks.append(c[:, :cfg.action_dim])
        if not obs:
            raise ValueError("training data is empty")
        batch = batch_from_observations(obs, cfg, norm)
        a = norm.normalize("action", np.stack(chunks))
        return cls(batch, a, norm)


@dataclass
class TrainResult:
    metrics: list[tuple[int, float, float, float]] = field(default_factory=list)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for step, loss, lr, gn in self.metrics:
            w.writerow([step, repr(loss), repr(lr), repr(gn)])
        return buf.getvalue()


def train(model: FlowPolicy, data: TrainingData, tcfg: TrainConfig,
          fixed_noise: bool = False, aux_coef: float | None = None) -> TrainResult:
    """Adam on the flow-matching loss; one metrics row per optimizer step.

    ``fixed_noise`` draws one (batch, tau, noise) triple and reuses it every
    step, which makes the loss curve a deterministic overfitting check.
    """
    rng = np.random.default_rng(tcfg.seed)
    sched = LRSchedule(tcfg.lr_peak, tcfg.lr_floor, tcfg.steps, tcfg.lr_kind)
    opt = Adam(list(model.named_parameters()), sched, (tcfg.beta1, tcfg.beta2), clip=tcfg.clip)
    aux = model.cfg.fusion.load_balance_coef if aux_coef is None else aux_coef
    result = TrainResult()
    n = len(data)
    h, da = model.cfg.horizon, model.cfg.action_dim
    fixed = None
    for step in range(tcfg.steps):
        opt.zero_grad()
        total = 0.0
        for _ in range(tcfg.grad_accumulation):
            if fixed is None or not fixed_noise:
                idx = rng.integers(0, n, size=min(tcfg.batch_size, n))
                tau = rng.uniform(0.0, 1.0, size=idx.size)
                a0 = rng.standard_normal((idx.size, h, da))
                fixed = (idx, tau, a0)
            idx, tau, a0 = fixed
            loss = model.fm_loss(data.batch.take(idx), data.chunks[idx], tau, a0, aux)
            if tcfg.grad_accumulation > 1:
                loss = loss * (1.0 / tcfg.grad_accumulation)
            if not math.isfinite(loss.item()):
                raise NumericalFailure(step, f"loss is {loss.item()}")
            loss.backward()
            total += loss.item()
        lr = opt.lr
        try:
            gn = opt.step()
        except NonFiniteGradient as exc:
            raise NumericalFailure(step, str(exc)) from None
        result.metrics.append((step, total, lr, gn))
    return result


# -- checkpoints -------------------------------------------------------------------
def checkpoint_payload(model: FlowPolicy, norm: NormStats | None) -> dict[str, np.ndarray]:
    params = {"meta.variant": np.array([float(model.variant.index)])}
    params.update(model.state_dict())
    if norm is not None:
        params.update(norm.to_dict())
    return params


def checkpoint_bytes(model: FlowPolicy, norm: NormStats | None) -> bytes:
    return encode_checkpoint(checkpoint_payload(model, norm))


def restore(payload: dict[str, np.ndarray], cfg: PolicyConfig) -> tuple[FlowPolicy, NormStats | None]:
    if "meta.variant" in payload:
        stored = list(PolicyVariant)[int(payload["meta.variant"][0])]
        if stored is not cfg.variant:
            raise ValueError(f"checkpoint holds variant {stored.value}, config asks for "
                             f"{cfg.variant.value}")
    model = FlowPolicy(cfg)
    model.load_state_dict({k: v for k, v in payload.items()
                           if not k.startswith(("meta.", "norm."))})
    norm = NormStats.from_dict(payload) if "norm.state_mean" in payload else None
    return model, norm


def load_policy(path, cfg: PolicyConfig) -> tuple[FlowPolicy, NormStats | None]:
    return restore(decode_checkpoint(Path(path).read_bytes()), cfg)


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_run_manifest(path, entries: dict[str, object]) -> None:
    Path(path).write_text(format_kv({k: str(v) for k, v in entries.items()}), encoding="utf-8")


def read_run_manifest(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


# -- closed loop -----------------------------------------------------------------------
@dataclass
class RouterRecord:
    episode: int
    timestep: int
    token: int
    role: str
    selected: int
    probs: tuple[float, ...]


class PolicyRunner:
    """Batch policy for ``sim.evaluate``: replans a chunk every ``replan`` steps."""

    def __init__(self, model: FlowPolicy, norm: NormStats, seed: int = 0,
                 n_steps: int | None = None, replan: int = 1, trace: bool = True):
        self.model, self.norm = model, norm
        self.seed = seed
        self.n_steps = n_steps
        self.replan = replan
        self.trace = trace
        self.records: list[RouterRecord] = []
        self.rng = np.random.default_rng(seed)
        self._queues: dict[int, list[np.ndarray]] = {}

    def reset(self, n_envs: int) -> None:
        self.rng = np.random.default_rng(self.seed)
        self._queues = {}
        self.records = []

    def act(self, observations, slots, timesteps) -> np.ndarray:
        need = [k for k, s in enumerate(slots) if not self._queues.get(s)]
        if need:
            cfg = self.model.cfg
            batch = batch_from_observations([observations[k] for k in need], cfg, self.norm)
            a, cond = self.model.sample_actions(batch, self.rng, self.n_steps,
                                                return_conditioning=True)
            a = self.norm.denormalize("action", a)
            for j, k in enumerate(need):
                act = np.zeros((cfg.horizon, 4))
                w = min(4, cfg.action_dim)
                act[:, :w] = a[j, :, :w]
                self._queues[slots[k]] = list(act[:self.replan])
            if self.trace and cond.decision is not None:
                self._record(cond, [slots[k] for k in need], [timesteps[k] for k in need])
        return np.array([self._queues[s].pop(0) for s in slots])

    def _record(self, cond, slots, timesteps) -> None:
        d = cond.decision
        probs = d.gate_probs.data
        n_tok = probs.shape[0] // len(slots)
        roles = cond.roles or ["vl"] * n_tok
        for j, (slot, t) in enumerate(zip(slots, timesteps)):
            for tok in range(n_tok):
                r = j * n_tok + tok
                self.records.append(RouterRecord(slot, t, tok, roles[tok], int(d.top1[r]),
                                                 tuple(float(p) for p in probs[r])))


def init_model(cfg: PolicyConfig) -> FlowPolicy:
    return FlowPolicy(cfg, Init(cfg.seed))
