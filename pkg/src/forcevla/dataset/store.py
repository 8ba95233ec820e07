"""Demonstration collection, action chunking and the on-disk dataset directory."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..sim.env import InsertionEnv, Observation, PerturbationMode, SimConfig
from ..sim.evaluate import episode_seed
from ..sim.expert import ScriptedExpert, rollout_expert
from .episode import (DEFAULT_ACTION_DIM, DatasetError, Episode, Timestep, format_kv, load_episode,
                      parse_kv, save_episode)
from .sync import synchronize

log = logging.getLogger(__name__)

COLLECT_STREAM = 0xC011EC7
TASK_INSERTION = "insertion"


def chunk(episode: Episode, horizon: int) -> list[tuple[Observation, np.ndarray]]:
    """One (observation, H-step action chunk) per timestep; the tail repeats the last action."""
    if len(episode) == 0:
        raise DatasetError("cannot chunk an empty episode")
    actions = episode.actions()
    n = len(actions)
    out = []
    for t, st in enumerate(episode.steps):
        idx = np.minimum(np.arange(t, t + horizon), n - 1)
        out.append((st.observation, actions[idx]))
    return out


def pad_action(a: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros(width)
    out[:a.size] = a
    return out


def record_episode(env: InsertionEnv, seed: int, episode_id: str,
                   action_dim: int = DEFAULT_ACTION_DIM) -> tuple[Episode, bool]:
    """Roll out the scripted expert and package the run as an Episode.

    The camera, proprioception, wrench and command streams are kept separate
    and aligned with ``synchronize`` on the camera clock.
    """
    states, observations, actions, success = rollout_expert(env, seed)
    dt = env.config.dt
    # the observation at tick k is the one the action at tick k was chosen from
    camera = [(k * dt, (o.base_view, o.wrist_view)) for k, o in enumerate(observations[:-1])]
    proprio = [(k * dt, o.state) for k, o in enumerate(observations[:-1])]
    wrench = [(k * dt, o.wrench) for k, o in enumerate(observations[:-1])]
    command = [(k * dt, pad_action(a, action_dim)) for k, a in enumerate(actions)]
    synced = synchronize({"camera": camera, "state": proprio, "wrench": wrench,
                          "action": command}, reference="camera")
    steps = [Timestep(r.timestamp,
                      Observation(r.values["camera"][0], r.values["camera"][1],
                                  r.values["state"], r.values["wrench"], env.instruction),
                      r.values["action"]) for r in synced]
    final = states[-1]
    manifest = {
        "episode_id": episode_id,
        "task": TASK_INSERTION,
        "task_id": env.instruction,
        "seed": seed,
        "mode": env.mode.value,
        "success": int(success),
        "step_count": len(actions),
        "failure_reason": "" if success else "timeout",
        "instruction": env.instruction,
        "grid": env.config.grid,
        "state_dim": env.config.state_dim,
        "action_dim": action_dim,
        "final_offset": repr(final.x - final.socket_x),
    }
    return Episode({k: str(v) for k, v in manifest.items()}, steps), success


@dataclass
class CollectResult:
    episodes: list[Episode]
    attempts: int
    successes: int

    @property
    def success_rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 1.0


def collect_demonstrations(mode: PerturbationMode | str, n_demos: int, seed: int,
                           config: SimConfig | None = None, instruction: int = 0,
                           min_success_rate: float = 0.5,
                           action_dim: int = DEFAULT_ACTION_DIM) -> CollectResult:
    """Keep successful expert episodes until ``n_demos`` are gathered."""
    env = InsertionEnv(config, mode, instruction)
    episodes, attempts, successes = [], 0, 0
    max_attempts = max(4 * n_demos, 10)
    while len(episodes) < n_demos:
        if attempts >= max_attempts:
            break
        ep_seed = episode_seed(seed, attempts, COLLECT_STREAM)
        ep, ok = record_episode(env, ep_seed, f"ep{len(episodes):04d}", action_dim)
        attempts += 1
        if ok:
            successes += 1
            episodes.append(ep)
    res = CollectResult(episodes, attempts, successes)
    if attempts and res.success_rate < min_success_rate:
        raise DatasetError(
            f"expert success rate {res.success_rate:.0%} below {min_success_rate:.0%}; "
            "check the simulator geometry")
    if len(episodes) < n_demos:
        raise DatasetError(f"only {len(episodes)} of {n_demos} demonstrations after "
                           f"{attempts} attempts")
    return res


# -- directory layout -------------------------------------------------------------
def write_dataset(root, episodes: list[Episode], task: str = TASK_INSERTION,
                  extra: dict | None = None) -> str:
    """Write ``<root>/<task>/<id>.fvd`` files and ``<root>/manifest.txt``; returns the hash."""
    root = Path(root)
    (root / task).mkdir(parents=True, exist_ok=True)
    digests = []
    for ep in episodes:
        digest = save_episode(root / task / f"{ep.episode_id}.fvd", ep)
        digests.append((ep.episode_id, digest))
    h = dataset_hash_from_digests(digests)
    manifest = {"task": task, "n_episodes": len(episodes),
                "n_timesteps": sum(len(e) for e in episodes), "hash": h}
    manifest.update(extra or {})
    manifest["episodes"] = ",".join(e.episode_id for e in episodes)
    (root / "manifest.txt").write_text(format_kv(manifest), encoding="utf-8")
    return h


def dataset_hash_from_digests(digests) -> str:
    h = hashlib.sha256()
    for name, digest in sorted(digests):
        h.update(f"{name}:{digest}\n".encode())
    return h.hexdigest()


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"no dataset manifest at {path}")
    return parse_kv(path.read_text(encoding="utf-8"))


def load_dataset(root) -> tuple[dict[str, str], list[Episode]]:
    root = Path(root)
    manifest = read_manifest(root)
    task = manifest.get("task", TASK_INSERTION)
    ids = [i for i in manifest.get("episodes", "").split(",") if i]
    episodes = [load_episode(root / task / f"{i}.fvd") for i in ids]
    return manifest, episodes


def dataset_hash(root) -> str:
    """Hash of the episode file bytes listed in the manifest (platform independent)."""
    root = Path(root)
    manifest = read_manifest(root)
    task = manifest.get("task", TASK_INSERTION)
    ids = [i for i in manifest.get("episodes", "").split(",") if i]
    digests = [(i, hashlib.sha256((root / task / f"{i}.fvd").read_bytes()).hexdigest())
               for i in ids]
    return dataset_hash_from_digests(digests)
