"""
Run configuration
A single YAML file with CLI overrides; precedence is CLI > file > defaults
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.utils.errors import ConfigError

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    dataset: Optional[str] = None
    references: Optional[str] = None
    pairs: Optional[str] = None
    output_dir: str = "./runs/default"


class SynthConfig(_Section):
    num_users: int = 200
    num_items: int = 200
    groups: int = 2
    group_item_fraction: float = Field(0.6, gt=0.0, le=1.0)
    in_group_prob: float = Field(0.9, ge=0.0, le=1.0)
    cross_group_prob: float = Field(0.02, ge=0.0, le=1.0)


class SplitConfig(_Section):
    validation_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    test_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    bins: int = Field(5, ge=1)
    zero_shot_fraction: float = Field(0.0, ge=0.0, le=1.0)


class GraphConfig(_Section):
    dim: int = 64
    num_layers: int = Field(3, ge=0)
    batch_size: int = 1024
    reg_weight: float = Field(1e-4, ge=0.0)
    lr: float = Field(1e-3, ge=0.0)
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    patience: int = 10
    recall_k: int = 20
    max_epochs: int = 200
    init_std: float = 0.1


class AdapterConfig(_Section):
    num_experts: int = 8
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    gate_noise: float = Field(0.01, ge=0.0)
    shared: bool = True


class LmConfig(_Section):
    hidden: int = 128
    num_layers: int = 4
    num_heads: int = 4
    max_context: int = 512
    ff_mult: int = 4
    init_std: float = 0.02


class PretrainConfig(_Section):
    steps: int = 200
    batch_size: int = 16
    lr: float = 3e-3
    heldout_fraction: float = Field(0.1, ge=0.0, lt=1.0)


class AdapterTrainConfig(_Section):
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-3


class DecodeConfig(_Section):
    mode: Literal["greedy", "sampled"] = "greedy"
    temperature: float = Field(1.0, gt=0.0)
    max_words: int = 50


class AblationConfig(_Section):
    profiles: bool = True
    injection: bool = True


class BackendConfig(_Section):
    kind: Literal["template", "external"] = "template"
    base_url: Optional[str] = None
    token_env: Optional[str] = None
    model: Optional[str] = None
    timeout: float = 30.0
    retries: int = 3
    max_in_flight: int = 4
    fallback_to_template: bool = False
    profile_sample_size: int = 5


class RunConfig(_Section):
    seed: int = 0
    zero_shot: bool = False
    data: DataConfig = Field(default_factory=DataConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    adapter: AdapterConfig = Field(default_factory=AdapterConfig)
    lm: LmConfig = Field(default_factory=LmConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    adapter_train: AdapterTrainConfig = Field(default_factory=AdapterTrainConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)

    def dump(self, path: Union[str, Path]) -> Path:
        """Write the resolved config next to the outputs it produced"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True), encoding="utf-8")
        return path


def _coerce(raw: str) -> Any:
    # YAML scalars: "0.01" -> float, "true" -> bool, "[0.9, 0.99]" -> list
    return yaml.safe_load(raw)


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply dotted `key=value` assignments, e.g. `graph.lr=0.01`"""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
        node[parts[-1]] = _coerce(raw)
    return data


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    """Defaults, then the YAML file, then CLI overrides"""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file must hold a mapping: {path}")
        data = loaded
    data = apply_overrides(data, overrides or [])
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    logger.debug("Resolved run config: %s", config.model_dump(mode="json"))
    return config
