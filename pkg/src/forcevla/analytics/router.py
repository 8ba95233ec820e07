"""Router traces and the expert-load-over-task-progress curve."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

N_INTERVALS = 100


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    episode: int
    timestep: int
    token: int
    role: str
    selected: int
    probs: tuple[float, ...]

    @property
    def top1(self) -> float:
        return self.probs[self.selected]


@dataclass
class RouterTrace:
    n_experts: int
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def extend(self, recs: Iterable) -> None:
        for r in recs:
            self.records.append(TraceRecord(int(r.episode), int(r.timestep), int(r.token), str(r.role),
                                            int(r.selected), tuple(float(p) for p in r.probs)))

    def validate(self, atol: float = 1e-9) -> None:
        for i, r in enumerate(self.records):
            if len(r.probs) != self.n_experts:
                raise TraceError(f"record {i}: {len(r.probs)} probabilities, expected {self.n_experts}")
            if not 0 <= r.selected < self.n_experts:
                raise TraceError(f"record {i}: expert index {r.selected} out of range")
            s = sum(r.probs)
            if abs(s - 1.0) > atol:
                raise TraceError(f"record {i}: gate probabilities sum to {s!r}")

    def by_episode(self, roles: Sequence[str] | None = None) -> dict[int, list[TraceRecord]]:
        """Token sequences per episode, ordered by (timestep, token)."""
        groups: dict[int, list[TraceRecord]] = {}
        for r in self.records:
            if roles is None or r.role in roles:
                groups.setdefault(r.episode, []).append(r)
        return {k: sorted(v, key=lambda r: (r.timestep, r.token)) for k, v in sorted(groups.items())}

    def header(self) -> list[str]:
        return ["episode", "timestep", "token", "role", "selected"] + [
            f"p{e}" for e in range(self.n_experts)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.records:
            w.writerow([r.episode, r.timestep, r.token, r.role, r.selected, *map(repr, r.probs)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RouterTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise TraceError("empty trace file")
        head = rows[0]
        if head[:5] != ["episode", "timestep", "token", "role", "selected"]:
            raise TraceError(f"unexpected trace header {head[:5]}")
        trace = cls(len(head) - 5)
        for n, row in enumerate(rows[1:], start=2):
            if len(row) != len(head):
                raise TraceError(f"line {n}: {len(row)} fields, expected {len(head)}")
            trace.records.append(TraceRecord(int(row[0]), int(row[1]), int(row[2]), row[3],
                                             int(row[4]), tuple(float(p) for p in row[5:])))
        return trace

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RouterTrace":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


@dataclass
class LoadCurve:
    values: np.ndarray  # (100, E)
    task: str = ""
    n_episodes: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_INTERVALS:
            raise TraceError(f"load curve must have {N_INTERVALS} rows, got shape {self.values.shape}")

    @property
    def n_experts(self) -> int:
        return self.values.shape[1]


def interval_bounds(length: int, n: int = N_INTERVALS) -> list[tuple[int, int]]:
    """Half-open index ranges; interval j is [floor(jL/n), floor((j+1)L/n))."""
    return [(j * length // n, (j + 1) * length // n) for j in range(n)]


def token_attribution(records: Sequence[TraceRecord], n_experts: int,
                      attribution: str = "top1") -> np.ndarray:
    out = np.zeros((len(records), n_experts))
    for i, r in enumerate(records):
        if attribution == "top1":
            out[i, r.selected] = r.top1
        elif attribution == "full":
            out[i] = r.probs
        else:
            raise ValueError(f"unknown attribution {attribution!r}")
    return out


def episode_load(attr: np.ndarray) -> np.ndarray:
    """Per-interval means of one episode's (L, E) attribution matrix."""
    L, E = attr.shape
    if L == 0:
        raise TraceError("episode has no token records")
    out = np.empty((N_INTERVALS, E))
    filled = np.zeros(N_INTERVALS, dtype=bool)
    for j, (lo, hi) in enumerate(interval_bounds(L)):
        if hi > lo:
            out[j] = attr[lo:hi].mean(axis=0)
            filled[j] = True
        elif j > 0 and filled[j - 1]:
            out[j] = out[j - 1]
            filled[j] = True
    # leading empty intervals have no predecessor: take the first filled value
    first = int(np.argmax(filled))
    out[:first] = out[first]
    return out


def percentile_load(episodes: Mapping[int, Sequence[TraceRecord]] | Sequence[Sequence[TraceRecord]],
                    n_experts: int, task: str = "", attribution: str = "top1") -> LoadCurve:
    seqs = list(episodes.values()) if isinstance(episodes, Mapping) else list(episodes)
    if not seqs:
        raise TraceError("percentile_load needs at least one episode")
    total = np.zeros((N_INTERVALS, n_experts))
    for seq in seqs:
        total += episode_load(token_attribution(seq, n_experts, attribution))
    return LoadCurve(total / len(seqs), task, len(seqs))


# -- emission ------------------------------------------------------------------------
def curve_to_csv(curve: LoadCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["percentile"] + [f"expert_{e}" for e in range(curve.n_experts)])
    for j, row in enumerate(curve.values):
        w.writerow([j, *map(repr, (float(v) for v in row))])
    return buf.getvalue()


def curve_from_csv(text: str, task: str = "") -> LoadCurve:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "percentile":
        raise TraceError("not a load-curve CSV")
    vals = [[float(v) for v in r[1:]] for r in rows[1:]]
    return LoadCurve(np.array(vals), task)


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def curve_to_svg(curve: LoadCurve, width: int = 480, height: int = 300) -> str:
    """Plain SVG line plot: x is task completion (0-100%), y is expert load (0-1)."""
    ml, mr, mt, mb = 50, 90, 20, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(j):
        return ml + pw * j / (N_INTERVALS - 1)

    def py(v):
        return mt + ph * (1.0 - v)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for k in range(5):
        frac = k / 4
        x, y = ml + pw * frac, py(frac)
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 15}" font-size="10" '
                   f'text-anchor="middle">{int(frac * 100)}%</text>')
        out.append(f'<text x="{ml - 6}" y="{y + 3:.1f}" font-size="10" '
                   f'text-anchor="end">{frac:.2f}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 5}" font-size="11" '
               f'text-anchor="middle">task completion</text>')
    out.append(f'<text x="12" y="{mt + ph / 2}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 12 {mt + ph / 2})">expert load</text>')
    for e in range(curve.n_experts):
        color = _COLORS[e % len(_COLORS)]
        pts = " ".join(f"{px(j):.2f},{py(float(v)):.2f}" for j, v in enumerate(curve.values[:, e]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{ml + pw + 8}" y="{mt + 14 * (e + 1)}" font-size="10" '
                   f'fill="{color}">expert {e}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_to_png(curve: LoadCurve, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = np.arange(N_INTERVALS)
    for e in range(curve.n_experts):
        ax.plot(x, curve.values[:, e], label=f"expert {e}", lw=1.4)
    ax.set_xlim(0, 100)
    ax.set_ylim(0, 1)
    ax.set_xlabel("task completion (%)")
    ax.set_ylabel("expert load")
    if curve.task:
        ax.set_title(curve.task)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across reruns
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_curves(curve: LoadCurve, out_dir, stem: str = "expert_load",
                png: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{stem}.csv", "svg": out_dir / f"{stem}.svg"}
    paths["csv"].write_text(curve_to_csv(curve), encoding="utf-8")
    paths["svg"].write_text(curve_to_svg(curve), encoding="utf-8")
    if png:
        paths["png"] = out_dir / f"{stem}.png"
        curve_to_png(curve, paths["png"])
    return paths
