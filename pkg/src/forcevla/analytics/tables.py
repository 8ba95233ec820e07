"""Evaluation logs and the success-rate table per (variant, mode)."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ..sim.evaluate import EpisodeLog

EPISODE_HEADER = ("episode", "seed", "mode", "success", "steps", "failure_reason",
                  "final_offset", "final_depth")
MISSING = "MISSING"


class TableError(ValueError):
    pass


def episodes_to_csv(logs: Sequence[EpisodeLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_HEADER)
    for e in logs:
        w.writerow([e.episode, e.seed, e.mode, int(e.success), e.steps, e.failure_reason,
                    repr(float(e.final_offset)), repr(float(e.final_depth))])
    return buf.getvalue()


def episodes_from_csv(text: str) -> list[EpisodeLog]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != EPISODE_HEADER:
        raise TableError(f"unexpected episode-log header {reader.fieldnames}")
    return [EpisodeLog(int(r["episode"]), int(r["seed"]), r["mode"], r["success"] == "1",
                       int(r["steps"]), r["failure_reason"], float(r["final_offset"]),
                       float(r["final_depth"])) for r in reader]


@dataclass(frozen=True)
class EvalRun:
    variant: str
    mode: str
    seed: int
    successes: int
    trials: int

    @property
    def percent(self) -> float:
        return 100.0 * self.successes / self.trials

    @classmethod
    def from_logs(cls, variant: str, mode: str, seed: int, logs: Sequence[EpisodeLog]) -> "EvalRun":
        if not logs:
            raise TableError(f"no episodes for {variant}/{mode}/seed {seed}")
        return cls(variant, mode, seed, sum(e.success for e in logs), len(logs))


@dataclass
class Cell:
    runs: list[EvalRun] = field(default_factory=list)

    @property
    def per_seed(self) -> list[tuple[int, float]]:
        return [(r.seed, r.percent) for r in sorted(self.runs, key=lambda r: r.seed)]

    @property
    def mean(self) -> float:
        vals = [p for _, p in self.per_seed]
        return sum(vals) / len(vals)


@dataclass
class SuccessTable:
    variants: list[str]
    modes: list[str]
    cells: dict[tuple[str, str], Cell]

    def cell(self, variant: str, mode: str) -> Cell | None:
        return self.cells.get((variant, mode))

    def mean(self, variant: str, mode: str) -> float | None:
        c = self.cell(variant, mode)
        return c.mean if c else None

    @property
    def missing(self) -> list[tuple[str, str]]:
        return [(v, m) for v in self.variants for m in self.modes if (v, m) not in self.cells]

    def to_csv(self, mode_labels: dict[str, str] | None = None) -> str:
        """Rows are models, columns are perturbation modes; cells are mean success (%)."""
        labels = mode_labels or {}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + [labels.get(m, m) for m in self.modes])
        for v in self.variants:
            row = [v]
            for m in self.modes:
                c = self.cell(v, m)
                row.append(MISSING if c is None else f"{c.mean:.1f}")
            w.writerow(row)
        return buf.getvalue()

    def per_seed_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "mode", "seed", "successes", "trials", "success_pct"])
        for v in self.variants:
            for m in self.modes:
                c = self.cell(v, m)
                if c is None:
                    w.writerow([v, m, MISSING, "", "", ""])
                    continue
                for r in sorted(c.runs, key=lambda r: r.seed):
                    w.writerow([v, m, r.seed, r.successes, r.trials, f"{r.percent:.1f}"])
        return buf.getvalue()


def aggregate_eval(runs: Iterable[EvalRun], variants: Sequence[str] | None = None,
                   modes: Sequence[str] | None = None) -> SuccessTable:
    """Group runs into cells. Declared orderings win; otherwise first-seen order.

    Cells with no run stay absent and are listed by ``SuccessTable.missing``.
    """
    runs = list(runs)
    if not runs and not (variants and modes):
        raise TableError("no evaluation runs to aggregate")
    vs = list(variants) if variants else list(dict.fromkeys(r.variant for r in runs))
    ms = list(modes) if modes else list(dict.fromkeys(r.mode for r in runs))
    cells: dict[tuple[str, str], Cell] = {}
    for r in runs:
        if r.variant not in vs or r.mode not in ms:
            continue
        cell = cells.setdefault((r.variant, r.mode), Cell())
        if any(x.seed == r.seed for x in cell.runs):
            raise TableError(f"duplicate seed {r.seed} for {r.variant}/{r.mode}")
        cell.runs.append(r)
    return SuccessTable(vs, ms, cells)


def write_table(table: SuccessTable, out_dir, stem: str = "success",
                mode_labels: dict[str, str] | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"table": out_dir / f"{stem}_table.csv", "per_seed": out_dir / f"{stem}_per_seed.csv"}
    paths["table"].write_text(table.to_csv(mode_labels), encoding="utf-8")
    paths["per_seed"].write_text(table.per_seed_csv(), encoding="utf-8")
    return paths
