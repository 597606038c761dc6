"""Model, hardware and cost-model configuration.

Configs are immutable after load and parameterize every other module.
Per-expert weight size is not published directly for the supported
models, so it is derived from the total and non-MoE byte counts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a configuration file is malformed or violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    """Static shape and memory description of one MoE model."""

    name: str
    num_layers: int
    num_experts: int
    top_k: int
    total_param_bytes: int
    non_moe_bytes: int
    predictor_mem_bytes: int
    kv_reserve_bytes: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_experts < 2:
            raise ConfigError(f"num_experts must be >= 2, got {self.num_experts}")
        if not 1 <= self.top_k < self.num_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= top_k < num_experts, "
                f"got top_k={self.top_k}, num_experts={self.num_experts}"
            )
        if self.non_moe_bytes >= self.total_param_bytes:
            raise ConfigError(
                f"non_moe_bytes ({self.non_moe_bytes}) must be smaller than "
                f"total_param_bytes ({self.total_param_bytes})"
            )
        for field in ("total_param_bytes", "non_moe_bytes", "predictor_mem_bytes", "kv_reserve_bytes"):
            if getattr(self, field) < 0:
                raise ConfigError(f"{field} must be non-negative")
        if self.expert_bytes <= 0:
            raise ConfigError(
                f"derived expert size must be positive, got {self.expert_bytes}"
            )

    @property
    def expert_bytes(self) -> int:
        return derive_expert_bytes(self)


@dataclass(frozen=True)
class CostModel:
    """Timing parameters of the modeled host-device link and operators.

    All times are seconds; bandwidth is bytes per second. Expert compute
    for a grouped token batch is affine: base + n_tokens * per_token.
    """

    link_bandwidth_bytes_per_s: float
    link_latency_s: float
    expert_compute_base_s: float
    expert_compute_per_token_s: float
    non_moe_compute_per_layer_s: float
    gate_compute_s: float
    predictor_latency_s: float

    def __post_init__(self):
        for field, value in asdict(self).items():
            if not value > 0:
                raise ConfigError(f"cost model field {field} must be strictly positive, got {value}")

    def transfer_time_s(self, nbytes: int) -> float:
        """Time to move one weight blob across the link, setup included."""
        return self.link_latency_s + nbytes / self.link_bandwidth_bytes_per_s


class SchedulerPolicy(str, Enum):
    """Expert scheduling policies compared by the simulator."""

    ON_DEMAND = "ondemand"          # fetch activated experts after the gate, blocking
    PREFETCH_ALL = "prefetchall"    # stream every expert of every layer
    DUOSERVE = "duoserve"           # pipelined prefill + predictor-driven decode prefetch
    DUOSERVE_ORACLE = "oracle"      # duoserve with a perfect predictor

    @property
    def needs_predictor(self) -> bool:
        return self is SchedulerPolicy.DUOSERVE


def slot_count(policy: SchedulerPolicy, cfg: ModelConfig) -> int:
    """Device expert-cache slots granted to a policy.

    OnDemand holds exactly the activated experts. DuoServe needs k
    computing plus k prefetching. PrefetchAll double-buffers whole
    layers.
    """
    if policy is SchedulerPolicy.ON_DEMAND:
        return cfg.top_k
    if policy in (SchedulerPolicy.DUOSERVE, SchedulerPolicy.DUOSERVE_ORACLE):
        return 2 * cfg.top_k
    if policy is SchedulerPolicy.PREFETCH_ALL:
        return 2 * cfg.num_experts
    raise ConfigError(f"unknown policy {policy!r}")


def derive_expert_bytes(cfg: ModelConfig) -> int:
    """Uniform per-expert weight size implied by the published totals."""
    moe_bytes = cfg.total_param_bytes - cfg.non_moe_bytes
    return moe_bytes // (cfg.num_layers * cfg.num_experts)


_MODEL_FIELDS = (
    "name", "num_layers", "num_experts", "top_k",
    "total_param_bytes", "non_moe_bytes", "predictor_mem_bytes", "kv_reserve_bytes",
)
_COST_FIELDS = (
    "link_bandwidth_bytes_per_s", "link_latency_s",
    "expert_compute_base_s", "expert_compute_per_token_s",
    "non_moe_compute_per_layer_s", "gate_compute_s", "predictor_latency_s",
)

_BYTE_FIELDS = {
    "total_param_bytes", "non_moe_bytes", "predictor_mem_bytes", "kv_reserve_bytes",
    "num_layers", "num_experts", "top_k",
}


def _section(doc: dict, key: str, fields, path) -> dict:
    if key not in doc or not isinstance(doc[key], dict):
        raise ConfigError(f"{path}: missing '{key}' section")
    section = doc[key]
    unknown = set(section) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown {key} fields {sorted(unknown)}")
    missing = set(fields) - set(section)
    if missing:
        raise ConfigError(f"{path}: missing {key} fields {sorted(missing)}")
    out = {}
    for name in fields:
        value = section[name]
        if name == "name":
            if not isinstance(value, str) or not value:
                raise ConfigError(f"{path}: model.name must be a non-empty string")
        elif name in _BYTE_FIELDS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{path}: {key}.{name} must be an integer, got {value!r}")
        else:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}: {key}.{name} must be a number, got {value!r}")
            value = float(value)
        out[name] = value
    return out


def load_config(path) -> tuple[ModelConfig, CostModel]:
    """Load and validate a JSON config file with 'model' and 'cost' sections."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    model = ModelConfig(**_section(doc, "model", _MODEL_FIELDS, path))
    cost = CostModel(**_section(doc, "cost", _COST_FIELDS, path))
    return model, cost


def config_to_json(cfg: ModelConfig, cost: CostModel) -> str:
    """Canonical JSON form, stable byte-for-byte for digesting."""
    doc = {"model": asdict(cfg), "cost": asdict(cost)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_config(cfg: ModelConfig, cost: CostModel, path) -> None:
    Path(path).write_text(config_to_json(cfg, cost), encoding="utf-8")


def preset_names() -> list[str]:
    root = resources.files("duoserve").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> tuple[ModelConfig, CostModel]:
    """Load one of the shipped preset configs by name (e.g. 'mixtral-8x7b')."""
    res = resources.files("duoserve").joinpath("presets", f"{name}.json")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    with resources.as_file(res) as p:
        return load_config(p)
