from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields, replace

from ..fvlmoe import FusionConfig


class ConfigError(ValueError):
    pass


class PolicyVariant(str, enum.Enum):
    NO_FORCE = "NoForce"
    FORCE_CONCAT_STATE = "ForceConcatState"
    LINEAR_BEFORE_VLM = "LinearBeforeVLM"
    MOE_BEFORE_VLM = "MoEBeforeVLM"
    CONCAT_AFTER_VLM = "ConcatAfterVLM"
    FVLMOE = "FVLMoE"

    @classmethod
    def parse(cls, text: str) -> "PolicyVariant":
        key = text.strip().replace("_", "").replace("-", "").lower()
        for v in cls:
            if v.value.lower() == key:
                return v
        raise ConfigError(f"unknown policy variant {text!r}; expected one of "
                          f"{[v.value for v in cls]}")

    @property
    def index(self) -> int:
        return list(PolicyVariant).index(self)

    @property
    def uses_force(self) -> bool:
        return self is not PolicyVariant.NO_FORCE


@dataclass(frozen=True)
class PolicyConfig:
    variant: PolicyVariant = PolicyVariant.FVLMOE
    fusion: FusionConfig = field(default_factory=FusionConfig)
    grid: int = 16
    patch: int = 4
    n_views: int = 2
    n_instructions: int = 4
    encoder_blocks: int = 2
    encoder_mlp_expansion: int = 2
    suffix_heads: int = 4
    suffix_mlp_expansion: int = 2
    state_dim: int = 4
    action_dim: int = 4
    n_flow_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.grid % self.patch:
            raise ConfigError(f"grid {self.grid} is not divisible by patch {self.patch}")
        if self.fusion.d_act % self.suffix_heads:
            raise ConfigError("d_act must be divisible by suffix_heads")
        if self.fusion.d_act % 2:
            raise ConfigError("d_act must be even (sinusoidal time embedding)")
        if self.n_flow_steps < 1:
            raise ConfigError("n_flow_steps must be >= 1")

    @property
    def d_model(self) -> int:
        return self.fusion.d_model

    @property
    def d_act(self) -> int:
        return self.fusion.d_act

    @property
    def horizon(self) -> int:
        return self.fusion.h_action

    @property
    def patches_per_view(self) -> int:
        return (self.grid // self.patch) ** 2

    @property
    def n_vl(self) -> int:
        """Number of context tokens the encoder emits."""
        n = self.n_views * self.patches_per_view + 1
        if self.variant in (PolicyVariant.LINEAR_BEFORE_VLM, PolicyVariant.MOE_BEFORE_VLM):
            n += 1
        return n

    def to_flat(self) -> dict[str, str]:
        out = {f.name: str(getattr(self, f.name)) for f in fields(self) if f.name != "fusion"}
        out["variant"] = self.variant.value
        out.update({f"fusion.{k}": str(v) for k, v in asdict(self.fusion).items()})
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "PolicyConfig":
        fus = {}
        top = {}
        ftypes = {f.name: f.type for f in fields(FusionConfig)}
        for k, v in flat.items():
            if k.startswith("fusion."):
                name = k.split(".", 1)[1]
                if name in ftypes:
                    fus[name] = float(v) if name == "load_balance_coef" else int(v)
            elif k == "variant":
                top[k] = PolicyVariant.parse(v)
            elif k in {f.name for f in fields(cls)}:
                top[k] = int(v)
        try:
            return cls(fusion=FusionConfig(**fus), **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_variant(self, variant: PolicyVariant) -> "PolicyConfig":
        return replace(self, variant=variant)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr_peak: float = 1e-3
    lr_floor: float = 1e-4
    lr_kind: str = "linear"
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    grad_accumulation: int = 1
    seed: int = 0
