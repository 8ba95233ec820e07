"""Episode records and the ``.fvd`` binary format.

File layout, little-endian throughout::

    b"FVD1" | u32 version | u32 manifest_len | manifest (utf-8 "key = value" lines)
    per timestep: f64 timestamp | f32 base[G*G] | f32 wrist[G*G] | f32 state[D_s]
                  | f32 wrench[6] | f32 action[D_a]

``grid``, ``state_dim``, ``action_dim`` and ``n_steps`` are manifest keys,
so the record size and expected file length follow from the manifest.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..sim.env import Observation

MAGIC = b"FVD1"
VERSION = 1
DEFAULT_STATE_DIM = 32
DEFAULT_ACTION_DIM = 32


class DatasetFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte offset {offset})")


class DatasetError(ValueError):
    pass


@dataclass
class Timestep:
    timestamp: float
    observation: Observation
    action: np.ndarray


@dataclass
class Episode:
    manifest: dict[str, str]
    steps: list[Timestep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def episode_id(self) -> str:
        return self.manifest.get("episode_id", "")

    def actions(self) -> np.ndarray:
        return np.stack([s.action for s in self.steps])

    def validate(self) -> None:
        ts = [s.timestamp for s in self.steps]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DatasetError(f"episode {self.episode_id}: timestamps must strictly increase")


# -- structured text ------------------------------------------------------------
def format_kv(pairs: dict[str, object]) -> str:
    lines = []
    for k, v in pairs.items():
        sv = str(v)
        if "\n" in sv or "=" in k:
            raise DatasetError(f"manifest entry {k!r} is not representable")
        lines.append(f"{k} = {sv}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"line {ln}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- binary ---------------------------------------------------------------------
def _layout(manifest: dict[str, str]) -> tuple[int, int, int, int]:
    try:
        return (int(manifest["grid"]), int(manifest["state_dim"]),
                int(manifest["action_dim"]), int(manifest["n_steps"]))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"manifest lacks layout key: {exc}") from None


def record_size(grid: int, state_dim: int, action_dim: int) -> int:
    return 8 + 4 * (2 * grid * grid + state_dim + 6 + action_dim)


def encode_episode(ep: Episode) -> bytes:
    manifest = dict(ep.manifest)
    manifest["n_steps"] = str(len(ep.steps))
    if ep.steps:
        o = ep.steps[0].observation
        manifest.setdefault("grid", str(o.base_view.shape[0]))
        manifest.setdefault("state_dim", str(o.state.size))
        manifest.setdefault("action_dim", str(ep.steps[0].action.size))
    grid, sdim, adim, _ = _layout(manifest)
    head = format_kv(manifest).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for st in ep.steps:
        o = st.observation
        for arr, n, what in ((o.base_view, grid * grid, "base_view"),
                             (o.wrist_view, grid * grid, "wrist_view"),
                             (o.state, sdim, "state"), (o.wrench, 6, "wrench"),
                             (st.action, adim, "action")):
            if np.size(arr) != n:
                raise DatasetError(f"{what} has {np.size(arr)} entries, layout needs {n}")
        parts.append(struct.pack("<d", st.timestamp))
        body = np.concatenate([np.ravel(o.base_view), np.ravel(o.wrist_view), np.ravel(o.state),
                               np.ravel(o.wrench), np.ravel(st.action)])
        parts.append(body.astype("<f4").tobytes())
    return b"".join(parts)


def decode_episode(buf: bytes) -> Episode:
    if len(buf) < 12:
        raise DatasetFormatError(f"truncated header: expected 12 bytes, got {len(buf)}", 0)
    if buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if 12 + mlen > len(buf):
        raise DatasetFormatError(
            f"truncated manifest: expected {12 + mlen} bytes, got {len(buf)}", 12)
    manifest = parse_kv(buf[12:12 + mlen].decode("utf-8"))
    grid, sdim, adim, n = _layout(manifest)
    rec = record_size(grid, sdim, adim)
    expected = 12 + mlen + n * rec
    if len(buf) != expected:
        raise DatasetFormatError(
            f"file length mismatch: expected {expected} bytes, got {len(buf)}",
            min(len(buf), expected))
    pos = 12 + mlen
    instr = int(manifest.get("instruction", 0))
    steps = []
    g2 = grid * grid
    for _ in range(n):
        (ts,) = struct.unpack_from("<d", buf, pos)
        vals = np.frombuffer(buf, dtype="<f4", count=(rec - 8) // 4, offset=pos + 8).astype(np.float64)
        pos += rec
        o = Observation(vals[:g2].reshape(grid, grid), vals[g2:2 * g2].reshape(grid, grid),
                        vals[2 * g2:2 * g2 + sdim], vals[2 * g2 + sdim:2 * g2 + sdim + 6], instr)
        steps.append(Timestep(ts, o, vals[2 * g2 + sdim + 6:]))
    return Episode(manifest, steps)


def save_episode(path, ep: Episode) -> str:
    data = encode_episode(ep)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_episode(path) -> Episode:
    return decode_episode(Path(path).read_bytes())
