"""Planar peg-in-socket insertion with quasi-static penalty contact.

Coordinates are metres, y points up, the socket's top surface sits at
``socket_y`` and its slot is centred on ``socket_x``. The peg pose is that
of its tip (bottom centre). Motion is kinematic: the commanded displacement
is applied, then the peg is backed out of contact until no penetration
exceeds ``max_penetration`` (vertical back-off on upward-facing surfaces, so
a chamfer never slides the peg sideways on its own). The reported wrench is
the sum of per-body penalty forces ``k_n * depth`` along the contact normal
plus Coulomb friction against the commanded sliding direction.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Penetration, deepest_penetration, rot, sample_boundary
from .render import render_views


class SimError(ValueError):
    pass


class PerturbationMode(str, enum.Enum):
    NOMINAL = "nominal"
    OCCLUSION = "occlusion"
    UNSTABLE_SOCKET = "unstable_socket"
    HEIGHT_SHIFT = "height_shift"
    OBJECT_VARIANT = "object_variant"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "PerturbationMode":
        key = text.strip().lower().replace("-", "_").replace(" ", "_").replace(".", "")
        aliases = {
            "visual_occlusion": "occlusion", "unstable": "unstable_socket",
            "height_gen": "height_shift", "object_gen": "object_variant",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise SimError(f"unknown perturbation mode {text!r}; "
                           f"expected one of {[m.value for m in cls]}") from None


_LABELS = {
    PerturbationMode.NOMINAL: "Nominal",
    PerturbationMode.OCCLUSION: "Visual Occlusion",
    PerturbationMode.UNSTABLE_SOCKET: "Unstable Socket",
    PerturbationMode.HEIGHT_SHIFT: "Height Gen.",
    PerturbationMode.OBJECT_VARIANT: "Object Gen.",
}


@dataclass(frozen=True)
class SimConfig:
    peg_half_width: float = 0.005
    peg_height: float = 0.040
    mouth_half_width: float = 0.006
    chamfer: float = 0.003
    depth: float = 0.020
    block_half_width: float = 0.025
    block_height: float = 0.030
    k_n: float = 2000.0
    mu: float = 0.3
    max_penetration: float = 0.0005
    max_step_xy: float = 0.005
    max_step_theta: float = 0.05
    substep_xy: float = 0.00025
    substep_theta: float = 0.005
    torque_limit: float = 2.0
    success_depth_frac: float = 0.9
    max_steps: int = 400
    dt: float = 0.1
    grip_width: float = 0.010
    state_dim: int = 32
    # episode randomization
    socket_x_range: float = 0.010
    peg_offset_range: float = 0.006
    start_height: float = 0.030
    # perturbation parameters
    anchor_stiffness: float = 4000.0
    height_range: float = 0.005
    object_scale: float = 0.9
    occlusion_rect: tuple = (-0.04, -0.04, 0.04, 0.004)  # xmin, ymin, xmax, ymax
    # rendering
    grid: int = 16
    base_center: tuple = (0.0, 0.0)
    base_extent: float = 0.08
    wrist_extent: float = 0.04
    supersample: int = 4
    boundary_samples: int = 9


@dataclass(frozen=True)
class WorldState:
    x: float
    y: float
    theta: float
    grip: float
    socket_x: float
    socket_y: float
    anchor_x: float
    mouth_half_width: float
    chamfer: float
    depth: float
    peg_half_width: float
    anchor_stiffness: float = math.inf
    t: float = 0.0
    step: int = 0

    @property
    def insertion_depth(self) -> float:
        return self.socket_y - self.y


@dataclass(frozen=True)
class Observation:
    base_view: np.ndarray
    wrist_view: np.ndarray
    state: np.ndarray
    wrench: np.ndarray
    instruction: int = 0


@dataclass(frozen=True)
class Contact:
    body: str
    point: np.ndarray
    normal: np.ndarray
    depth: float


# -- geometry of the scene ------------------------------------------------------
def socket_polygons(s: WorldState, cfg: SimConfig) -> dict[str, np.ndarray]:
    w, c, d = s.mouth_half_width, s.chamfer, s.depth
    bw, bh = cfg.block_half_width, cfg.block_height
    left = np.array([(-bw, -bh), (-w, -bh), (-w, -c), (-w - c, 0.0), (-bw, 0.0)])
    right = np.array([(w, -bh), (bw, -bh), (bw, 0.0), (w + c, 0.0), (w, -c)])
    floor = np.array([(-w, -bh), (w, -bh), (w, -d), (-w, -d)])
    off = np.array([s.socket_x, s.socket_y])
    return {"left": left + off, "right": right + off, "floor": floor + off}


def peg_polygon(s: WorldState, cfg: SimConfig) -> np.ndarray:
    pw, ph = s.peg_half_width, cfg.peg_height
    local = np.array([(-pw, 0.0), (pw, 0.0), (pw, ph), (-pw, ph)])
    return local @ rot(s.theta).T + np.array([s.x, s.y])


def find_contacts(s: WorldState, cfg: SimConfig) -> list[Contact]:
    """One contact per socket body: its deepest mutual penetration with the peg."""
    peg = peg_polygon(s, cfg)
    lo, hi = peg.min(axis=0), peg.max(axis=0)
    out = []
    bodies = socket_polygons(s, cfg)
    bodies = {k: p for k, p in bodies.items()
              if (p.min(axis=0) < hi).all() and (p.max(axis=0) > lo).all()}
    if not bodies:
        return out
    peg_pts = sample_boundary(peg, cfg.boundary_samples)
    for body, poly in bodies.items():
        best: Penetration | None = deepest_penetration(peg_pts, poly)
        # socket corners inside the peg push the peg the other way
        rev = deepest_penetration(poly, peg)
        if rev is not None and (best is None or rev.depth > best.depth):
            best = Penetration(rev.point, -rev.normal, rev.depth)
        if best is not None and best.depth > 0.0:
            out.append(Contact(body, best.point, best.normal, best.depth))
    return out


def contact_wrench(s: WorldState, contacts: list[Contact], motion: np.ndarray,
                   cfg: SimConfig) -> np.ndarray:
    """(fx, fy, 0, 0, 0, tau_z) on the peg, torque taken about the peg tip."""
    if not contacts:
        return np.zeros(6)
    force = np.zeros(2)
    torque = 0.0
    tip = np.array([s.x, s.y])
    for c in contacts:
        fn = cfg.k_n * c.depth
        f = fn * c.normal
        tangent = np.array([-c.normal[1], c.normal[0]])
        slide = float(motion @ tangent)
        if abs(slide) > 1e-12:
            f = f - cfg.mu * fn * math.copysign(1.0, slide) * tangent
        force += f
        r = c.point - tip
        torque += r[0] * f[1] - r[1] * f[0]
    return np.array([force[0], force[1], 0.0, 0.0, 0.0, torque])


def resolve_penetration(s: WorldState, cfg: SimConfig, iters: int = 32) -> WorldState:
    for _ in range(iters):
        cs = find_contacts(s, cfg)
        if not cs:
            return s
        worst = max(cs, key=lambda c: c.depth)
        excess = worst.depth - cfg.max_penetration
        if excess <= 1e-12:
            return s
        nx, ny = worst.normal
        if ny > 0.3:
            s = replace(s, y=s.y + excess / ny + 1e-12)
        else:
            s = replace(s, x=s.x + nx * (excess + 1e-12), y=s.y + ny * (excess + 1e-12))
    return s


def state_vector(s: WorldState, dim: int) -> np.ndarray:
    v = np.zeros(max(dim, 4))
    v[:4] = (s.x, s.y, s.theta, s.grip)
    return v


def is_success(s: WorldState, cfg: SimConfig) -> bool:
    return (abs(s.x - s.socket_x) <= s.mouth_half_width
            and s.insertion_depth >= cfg.success_depth_frac * s.depth)


class InsertionEnv:
    """Immutable-state environment: ``step`` maps (state, action) to a new state."""

    def __init__(self, config: SimConfig | None = None,
                 mode: PerturbationMode | str = PerturbationMode.NOMINAL, instruction: int = 0):
        self.config = config or SimConfig()
        self.mode = PerturbationMode.parse(mode) if isinstance(mode, str) else mode
        self.instruction = instruction

    def reset(self, seed: int) -> tuple[WorldState, Observation]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        sx = float(rng.uniform(-cfg.socket_x_range, cfg.socket_x_range))
        offset = float(rng.uniform(-cfg.peg_offset_range, cfg.peg_offset_range))
        height = float(rng.uniform(-cfg.height_range, cfg.height_range))
        sy = height if self.mode is PerturbationMode.HEIGHT_SHIFT else 0.0
        scale = cfg.object_scale if self.mode is PerturbationMode.OBJECT_VARIANT else 1.0
        stiff = cfg.anchor_stiffness if self.mode is PerturbationMode.UNSTABLE_SOCKET else math.inf
        s = WorldState(x=sx + offset, y=sy + cfg.start_height, theta=0.0, grip=cfg.grip_width,
                       socket_x=sx, socket_y=sy, anchor_x=sx,
                       mouth_half_width=cfg.mouth_half_width, chamfer=cfg.chamfer,
                       depth=cfg.depth, peg_half_width=cfg.peg_half_width * scale,
                       anchor_stiffness=stiff)
        return s, self.observe(s, np.zeros(6))

    def observe(self, s: WorldState, wrench: np.ndarray) -> Observation:
        base, wrist = render_views(s, self.config, self.mode)
        return Observation(base, wrist, state_vector(s, self.config.state_dim),
                           np.asarray(wrench, dtype=np.float64), self.instruction)

    def wrench(self, s: WorldState, motion=(0.0, 0.0)) -> np.ndarray:
        return contact_wrench(s, find_contacts(s, self.config), np.asarray(motion, float),
                              self.config)

    def step(self, s: WorldState, action) -> tuple[WorldState, Observation]:
        cfg = self.config
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.size < 4:
            raise SimError(f"action needs 4 entries (dx, dy, dtheta, grip), got {a.size}")
        if not np.isfinite(a[:4]).all():
            raise SimError(f"non-finite action {a[:4].tolist()}")
        dx = float(np.clip(a[0], -cfg.max_step_xy, cfg.max_step_xy))
        dy = float(np.clip(a[1], -cfg.max_step_xy, cfg.max_step_xy))
        dth = float(np.clip(a[2], -cfg.max_step_theta, cfg.max_step_theta))
        grip = float(np.clip(a[3], 0.0, 2 * cfg.grip_width))
        # substeps keep a large command from tunnelling through thin features
        n_sub = max(1, math.ceil(max(abs(dx), abs(dy)) / cfg.substep_xy),
                    math.ceil(abs(dth) / cfg.substep_theta))
        moved = replace(s, grip=grip, t=s.t + cfg.dt, step=s.step + 1)
        for _ in range(n_sub):
            moved = replace(moved, x=moved.x + dx / n_sub, y=moved.y + dy / n_sub,
                            theta=moved.theta + dth / n_sub)
            moved = resolve_penetration(moved, cfg)
        contacts = find_contacts(moved, cfg)
        wrench = contact_wrench(moved, contacts, np.array([dx, dy]), cfg)
        if math.isfinite(moved.anchor_stiffness):
            # socket pushed by the reaction force, springing about its anchor
            new_sx = moved.anchor_x - wrench[0] / moved.anchor_stiffness
            moved = replace(moved, socket_x=new_sx)
        return moved, self.observe(moved, wrench)
