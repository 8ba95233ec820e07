"""Run configuration: an INI file with [run], [train], [policy] and [fusion] sections.

Example::

    [run]
    task = insertion
    variant = FVLMoE
    mode = occlusion
    demos = 50
    seed = 0
    trials = 20

    [train]
    steps = 1500
    batch_size = 32

    [fusion]
    n_experts = 4

Every key is optional; missing keys take the defaults of the dataclasses
below. Unknown sections or keys are rejected so typos do not pass silently.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .fvlmoe import FusionConfig
from .policy.config import ConfigError, PolicyConfig, PolicyVariant, TrainConfig
from .sim.env import PerturbationMode

RUN_KEYS = {"task": str, "variant": str, "mode": str, "demos": int, "seed": int, "trials": int}


def _coerce(cls, section: str, items: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in items.items():
        if k not in types:
            raise ConfigError(f"[{section}] has no key {k!r}; known keys: {sorted(types)}")
        t = types[k]
        try:
            if t in ("int", int):
                out[k] = int(v)
            elif t in ("float", float):
                out[k] = float(v)
            else:
                out[k] = v
        except ValueError:
            raise ConfigError(f"[{section}] {k} = {v!r} is not a valid {t}") from None
    return out


@dataclass(frozen=True)
class RunConfig:
    task: str = "insertion"
    variant: PolicyVariant = PolicyVariant.FVLMOE
    mode: PerturbationMode = PerturbationMode.NOMINAL
    demos: int = 50
    seed: int = 0
    trials: int = 20
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.demos < 0:
            raise ConfigError("demos must be >= 0")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.train.steps < 0:
            raise ConfigError("train steps must be >= 0")

    def policy_config(self) -> PolicyConfig:
        return replace(self.policy, variant=self.variant, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def to_flat(self) -> dict[str, str]:
        out = {"run.task": self.task, "run.variant": self.variant.value,
               "run.mode": self.mode.value, "run.demos": str(self.demos),
               "run.seed": str(self.seed), "run.trials": str(self.trials)}
        for k, v in self.policy_config().to_flat().items():
            out[k if k.startswith("fusion.") else f"policy.{k}"] = v
        out.update({f"train.{f.name}": str(getattr(self.train, f.name)) for f in fields(self.train)})
        return out

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_flat().items()))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "variant" in kw and isinstance(kw["variant"], str):
            kw["variant"] = PolicyVariant.parse(kw["variant"])
        if "mode" in kw and isinstance(kw["mode"], str):
            kw["mode"] = parse_mode(kw["mode"])
        if "steps" in kw:
            kw["train"] = replace(self.train, steps=int(kw.pop("steps")))
        return replace(self, **kw)


def parse_mode(text: str) -> PerturbationMode:
    try:
        return PerturbationMode.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_run_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"run", "train", "policy", "fusion"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    run = dict(cp["run"]) if cp.has_section("run") else {}
    for k in run:
        if k not in RUN_KEYS:
            raise ConfigError(f"[run] has no key {k!r}; known keys: {sorted(RUN_KEYS)}")
    kw: dict = {}
    try:
        for k, t in RUN_KEYS.items():
            if k in run:
                kw[k] = t(run[k])
    except ValueError as exc:
        raise ConfigError(f"[run] {exc}") from None
    if "variant" in kw:
        kw["variant"] = PolicyVariant.parse(kw["variant"])
    if "mode" in kw:
        kw["mode"] = parse_mode(kw["mode"])
    try:
        fus = FusionConfig(**_coerce(FusionConfig, "fusion", dict(cp["fusion"]))) \
            if cp.has_section("fusion") else FusionConfig()
        pol_items = _coerce(PolicyConfig, "policy", dict(cp["policy"])) \
            if cp.has_section("policy") else {}
        pol_items.pop("variant", None)
        kw["policy"] = PolicyConfig(fusion=fus, **pol_items)
        if cp.has_section("train"):
            kw["train"] = TrainConfig(**_coerce(TrainConfig, "train", dict(cp["train"])))
        return RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_run_config(p.read_text(encoding="utf-8"))


def run_config_from_flat(flat: dict[str, str]) -> RunConfig:
    """Inverse of ``RunConfig.to_flat`` (used to rebuild a run from its manifest)."""
    run = {k[4:]: v for k, v in flat.items() if k.startswith("run.")}
    pol = {k[7:]: v for k, v in flat.items() if k.startswith("policy.")}
    pol.update({k: v for k, v in flat.items() if k.startswith("fusion.")})
    trn = {k[6:]: v for k, v in flat.items() if k.startswith("train.")}
    try:
        policy = PolicyConfig.from_flat(pol)
        train = TrainConfig(**_coerce(TrainConfig, "train", trn))
        return RunConfig(task=run.get("task", "insertion"),
                         variant=PolicyVariant.parse(run.get("variant", policy.variant.value)),
                         mode=parse_mode(run.get("mode", "nominal")),
                         demos=int(run.get("demos", 50)), seed=int(run.get("seed", 0)),
                         trials=int(run.get("trials", 20)), policy=policy, train=train)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"manifest does not describe a run config: {exc}") from None
