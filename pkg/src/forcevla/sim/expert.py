"""Scripted demonstrator standing in for teleoperation."""
from __future__ import annotations

import math

import numpy as np

from .env import InsertionEnv, Observation, PerturbationMode, SimConfig, WorldState

CONTACT_THRESHOLD = 0.5  # N, |f| that counts as contact
LATERAL_THRESHOLD = 0.3  # N, |fx| that triggers centring
TORQUE_THRESHOLD = 1e-3  # N*m, |tau_z| that locates a contact off the peg axis

PRIVILEGED_MODES = (PerturbationMode.NOMINAL, PerturbationMode.HEIGHT_SHIFT,
                    PerturbationMode.OBJECT_VARIANT)


class ScriptedExpert:
    """Phase machine: approach, descend, force-guided centring, insert, stop.

    With ``privileged`` the expert aligns over the true socket before
    descending; otherwise it descends blind and centres on the lateral
    contact force (the force on the peg points toward the slot). Resting on
    the flat top beside the mouth there is no lateral force, and the sign of
    the moment about the tip says which side the contact is on.
    """

    def __init__(self, config: SimConfig | None = None, privileged: bool = True,
                 descend_step: float = 0.003, contact_descend: float = 0.0015,
                 centre_step: float = 0.0004, target_margin: float = 0.0005):
        self.config = config or SimConfig()
        self.privileged = privileged
        self.descend_step = descend_step
        self.contact_descend = contact_descend
        self.centre_step = centre_step
        self.target_margin = target_margin

    @classmethod
    def for_mode(cls, mode: PerturbationMode, config: SimConfig | None = None) -> "ScriptedExpert":
        return cls(config, privileged=mode in PRIVILEGED_MODES)

    def phase(self, s: WorldState, obs: Observation) -> str:
        if s.insertion_depth >= s.depth - self.target_margin:
            return "done"
        f = obs.wrench
        if math.hypot(f[0], f[1]) > CONTACT_THRESHOLD:
            lateral = abs(f[0]) > LATERAL_THRESHOLD or abs(f[5]) > TORQUE_THRESHOLD
            return "centre" if lateral else "insert"
        if self.privileged and s.y > s.socket_y + 0.002 and abs(s.x - s.socket_x) > 2e-4:
            return "approach"
        return "descend"

    def __call__(self, s: WorldState, obs: Observation) -> np.ndarray:
        cfg = self.config
        grip = cfg.grip_width
        phase = self.phase(s, obs)
        if phase == "done":
            return np.array([0.0, 0.0, 0.0, grip])
        if phase == "approach":
            dx = float(np.clip(s.socket_x - s.x, -cfg.max_step_xy, cfg.max_step_xy))
            return np.array([dx, 0.0, 0.0, grip])
        if phase == "centre":
            f = obs.wrench
            side = f[0] if abs(f[0]) > LATERAL_THRESHOLD else -f[5]
            dx = math.copysign(self.centre_step, side)
            return np.array([dx, -self.contact_descend, 0.0, grip])
        if phase == "insert":
            return np.array([0.0, -self.contact_descend, 0.0, grip])
        remaining = s.insertion_depth - s.depth
        dy = max(-self.descend_step, remaining)
        return np.array([0.0, dy, 0.0, grip])


def rollout_expert(env: InsertionEnv, seed: int, expert: ScriptedExpert | None = None,
                   max_steps: int | None = None):
    """Run the expert; returns (states, observations, actions, success)."""
    from .env import is_success

    expert = expert or ScriptedExpert.for_mode(env.mode, env.config)
    max_steps = max_steps or env.config.max_steps
    s, obs = env.reset(seed)
    states, observations, actions = [s], [obs], []
    success = False
    for _ in range(max_steps):
        a = expert(s, obs)
        s, obs = env.step(s, a)
        actions.append(a)
        states.append(s)
        observations.append(obs)
        if is_success(s, env.config):
            success = True
            break
    return states, observations, actions, success
