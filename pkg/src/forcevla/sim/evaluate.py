"""Closed-loop rollouts of a batch policy and success bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .env import InsertionEnv, Observation, PerturbationMode, SimConfig, WorldState, is_success


def episode_seed(seed: int, index: int, stream: int = 0xE7A1) -> int:
    """Independent per-episode seed; evaluation and collection use different streams."""
    return int(np.random.SeedSequence([int(seed), stream, int(index)]).generate_state(1)[0])


class BatchPolicy(Protocol):
    def reset(self, n_envs: int) -> None: ...

    def act(self, observations: Sequence[Observation], slots: Sequence[int],
            timesteps: Sequence[int]) -> np.ndarray: ...


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    mode: str
    success: bool
    steps: int
    failure_reason: str
    final_offset: float
    final_depth: float


@dataclass
class EvalResult:
    mode: str
    episodes: list[EpisodeLog] = field(default_factory=list)

    @property
    def n_success(self) -> int:
        return sum(e.success for e in self.episodes)

    @property
    def success_rate(self) -> float:
        return self.n_success / len(self.episodes) if self.episodes else float("nan")


def torque_violation(mode: PerturbationMode, wrench: np.ndarray, cfg: SimConfig) -> bool:
    return mode is PerturbationMode.HEIGHT_SHIFT and abs(wrench[5]) > cfg.torque_limit


def evaluate(policy: BatchPolicy, mode, n_episodes: int, seed: int,
             config: SimConfig | None = None, instruction: int = 0,
             max_steps: int | None = None) -> EvalResult:
    """Run ``n_episodes`` in lock-step; the policy sees every live episode each tick.

    Success: tip within the mouth half-width of the slot centre and inserted
    to at least ``success_depth_frac`` of the slot depth, within ``max_steps``.
    """
    env = InsertionEnv(config, mode, instruction)
    cfg = env.config
    max_steps = cfg.max_steps if max_steps is None else max_steps
    seeds = [episode_seed(seed, i) for i in range(n_episodes)]
    states: list[WorldState] = []
    obs: list[Observation] = []
    for s in seeds:
        st, ob = env.reset(s)
        states.append(st)
        obs.append(ob)
    done = [False] * n_episodes
    logs: list[EpisodeLog | None] = [None] * n_episodes
    policy.reset(n_episodes)

    def finish(i: int, success: bool, reason: str, steps: int):
        st = states[i]
        logs[i] = EpisodeLog(i, seeds[i], env.mode.value, success, steps, reason,
                             st.x - st.socket_x, st.insertion_depth)
        done[i] = True

    for t in range(max_steps):
        live = [i for i in range(n_episodes) if not done[i]]
        if not live:
            break
        actions = np.asarray(policy.act([obs[i] for i in live], live, [t] * len(live)))
        for i, a in zip(live, actions):
            states[i], obs[i] = env.step(states[i], a)
            if torque_violation(env.mode, obs[i].wrench, cfg):
                finish(i, False, "torque_limit", t + 1)
            elif is_success(states[i], cfg):
                finish(i, True, "", t + 1)
    for i in range(n_episodes):
        if not done[i]:
            finish(i, False, "timeout", max_steps)
    return EvalResult(env.mode.value, list(logs))


class RandomPolicy:
    """Uniform actions inside the per-step motion limits."""

    def __init__(self, seed: int = 0, config: SimConfig | None = None):
        self.rng = np.random.default_rng(seed)
        self.config = config or SimConfig()

    def reset(self, n_envs: int) -> None:
        pass

    def act(self, observations, slots, timesteps) -> np.ndarray:
        c = self.config
        n = len(observations)
        xy = self.rng.uniform(-c.max_step_xy, c.max_step_xy, size=(n, 2))
        th = self.rng.uniform(-c.max_step_theta, c.max_step_theta, size=(n, 1))
        return np.concatenate([xy, th, np.full((n, 1), c.grip_width)], axis=1)


class ReplayPolicy:
    """Plays back fixed per-episode action sequences (zero action once exhausted)."""

    def __init__(self, sequences: Sequence[np.ndarray]):
        self.sequences = [np.asarray(s, dtype=np.float64) for s in sequences]

    def reset(self, n_envs: int) -> None:
        pass

    def act(self, observations, slots, timesteps) -> np.ndarray:
        out = []
        for slot, t in zip(slots, timesteps):
            seq = self.sequences[slot]
            out.append(seq[t, :4] if t < len(seq) else np.zeros(4))
        return np.array(out)
