"""Desk-scale variant comparison: collect, train and evaluate several variants over seeds.

Each seed gets its own demonstration set; every variant trains on the same
set with the same optimizer settings and is evaluated on the same episode
seeds, so differences come from the wiring alone.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

from .analytics import EvalRun, SuccessTable, aggregate_eval
from .dataset import collect_demonstrations
from .policy import PolicyConfig, PolicyRunner, PolicyVariant, TrainConfig, TrainingData
from .policy import init_model, train
from .sim import PerturbationMode, evaluate

log = logging.getLogger(__name__)

HEADLINE_VARIANTS = (PolicyVariant.NO_FORCE, PolicyVariant.CONCAT_AFTER_VLM,
                     PolicyVariant.FVLMOE)


@dataclass
class Comparison:
    table: SuccessTable
    elapsed: float
    train_seconds: dict[tuple[str, int], float] = field(default_factory=dict)

    def mean(self, variant: PolicyVariant | str, mode: PerturbationMode | str) -> float:
        v = variant.value if isinstance(variant, PolicyVariant) else variant
        m = mode.value if isinstance(mode, PerturbationMode) else mode
        out = self.table.mean(v, m)
        if out is None:
            raise KeyError(f"no result for {v} / {m}")
        return out


def compare_variants(mode: PerturbationMode | str, seeds: Sequence[int] = (0, 1, 2),
                     variants: Sequence[PolicyVariant] = HEADLINE_VARIANTS, demos: int = 50,
                     trials: int = 20, steps: int = 1500, batch_size: int = 32,
                     policy: PolicyConfig | None = None) -> Comparison:
    mode = PerturbationMode.parse(mode) if isinstance(mode, str) else mode
    base = policy or PolicyConfig()
    t0 = time.perf_counter()
    runs, train_s = [], {}
    for seed in seeds:
        episodes = collect_demonstrations(mode, demos, seed).episodes
        for variant in variants:
            cfg = replace(base, variant=variant, seed=seed)
            data = TrainingData.from_episodes(episodes, cfg)
            model = init_model(cfg)
            t = time.perf_counter()
            train(model, data, TrainConfig(steps=steps, batch_size=batch_size, seed=seed))
            train_s[(variant.value, seed)] = time.perf_counter() - t
            res = evaluate(PolicyRunner(model, data.norm, seed=seed, trace=False), mode, trials,
                           seed)
            runs.append(EvalRun.from_logs(variant.value, mode.value, seed, res.episodes))
            log.info("%s seed %d: %d/%d", variant.value, seed, runs[-1].successes, trials)
    table = aggregate_eval(runs, [v.value for v in variants], [mode.value])
    return Comparison(table, time.perf_counter() - t0, train_s)
