"""Versioned run configuration, loaded from YAML with strict validation.

Randomness: every component seed is derived from the single root seed with
:func:`derive_seed`, so one module's stream can change without disturbing the
others.  Environment variables ``MMRET_SEED``, ``MMRET_OUT`` and
``MMRET_THREADS`` override the file; command-line flags override both.
"""

from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from mmret.ablation import AblationSettings
from mmret.encoder import EncoderConfig
from mmret.errors import ConfigError
from mmret.miner import MiningConfig
from mmret.trainer import STAGES, StageConfig, TemperatureSpec

SCHEMA_VERSION = 1
ENV_PREFIX = "MMRET_"
PRESETS = ("quickstart", "smoke")


def derive_seed(root: int, name: str) -> int:
    """``sha256("<root>:<name>")`` truncated to 31 bits."""
    digest = hashlib.sha256(f"{int(root)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusParams(_Strict):
    n_concepts: int = Field(50, ge=2)
    n_queries_per_task: int = Field(200, ge=1)
    noise: float = Field(0.2, ge=0.0, lt=1.0)
    pool_size: Optional[int] = 1000
    test_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    min_len: int = 8
    max_len: int = 16
    d_latent: int = Field(8, ge=1)
    text_pairs: int = Field(4000, ge=0)
    text_image_pairs: int = Field(4000, ge=0)
    pair_noise: float = Field(0.1, ge=0.0, lt=1.0)


class EncoderParams(_Strict):
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 80
    attention_mode: Literal["causal", "bidirectional"] = "bidirectional"
    pooling_mode: Literal["last_token", "mean", "masked_mean"] = "mean"
    compression_suffix: bool = False
    positional_encoding: bool = True
    final_token_readout: bool = False
    d_ff: Optional[int] = None

    def build(self) -> EncoderConfig:
        return EncoderConfig(**self.model_dump())


class TemperatureParams(_Strict):
    mode: Literal["fixed", "learnable"] = "fixed"
    init: Optional[float] = 0.05


class StageParams(_Strict):
    stage: str
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 1
    steps: Optional[int] = None
    temperature: TemperatureParams = TemperatureParams()
    attention_mode_override: Optional[Literal["causal", "bidirectional"]] = None
    loss_direction: Literal["uni", "bi"] = "bi"
    data_source: Optional[str] = None
    hard_negatives_per_query: int = 4
    include_in_batch: bool = True
    remine: bool = False
    sample_fraction: float = 0.10
    teacher_temp: float = 1.0

    @field_validator("stage")
    @classmethod
    def _known(cls, v):
        if v not in STAGES:
            raise ValueError(f"unknown stage {v!r}; expected one of {', '.join(STAGES)}")
        return v

    def build(self, seed: int) -> StageConfig:
        d = self.model_dump()
        d["temperature"] = TemperatureSpec(**d["temperature"])
        return StageConfig(seed=seed, **d)


class MiningParams(_Strict):
    k: int = 16
    filter_mode: Literal["absolute", "relative_to_positive"] = "relative_to_positive"
    threshold: float = 0.0

    def build(self) -> MiningConfig:
        return MiningConfig(**self.model_dump())


class RerankerParams(_Strict):
    top_m: int = Field(100, ge=1)
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    n_negatives: int = Field(50, ge=0)
    normalize_recall: bool = False


class EvalParams(_Strict):
    scope: Literal["local", "global", "both"] = "both"
    k: dict[int, int] = Field(default_factory=dict)  # task index -> k override
    metric: Literal["recall", "map"] = "recall"
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    pipeline: bool = True


class AblationParams(_Strict):
    n_concepts: int = 16
    n_queries_per_task: int = 24
    noise: float = 0.2
    pool_size: int = 48
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 2
    batch_size: int = 32
    lr: float = 2e-3
    epochs: int = 2
    temperature: float = 0.05
    mining_k: int = 4

    def build(self) -> AblationSettings:
        return AblationSettings(**self.model_dump())


class RunConfig(_Strict):
    schema_version: Literal[1] = 1
    seed: int = 42
    output_dir: str = "runs/default"
    threads: int = Field(1, ge=1)
    corpus: CorpusParams = CorpusParams()
    encoder: EncoderParams = EncoderParams()
    stages: list[StageParams] = Field(default_factory=list)
    mining: MiningParams = MiningParams()
    reranker: RerankerParams = RerankerParams()
    eval: EvalParams = EvalParams()
    ablation: AblationParams = AblationParams()

    @field_validator("stages")
    @classmethod
    def _ordered(cls, v):
        names = [s.stage for s in v]
        if len(set(names)) != len(names):
            raise ValueError("each stage may appear at most once")
        pos = [STAGES.index(n) for n in names]
        if pos != sorted(pos):
            raise ValueError(f"stages must follow the order {', '.join(STAGES)}")
        return v

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.stage == name:
                return s.build(derive_seed(self.seed, f"stage.{name}"))
        raise ConfigError(f"stage {name!r} is not configured")

    def has_stage(self, name: str) -> bool:
        return any(s.stage == name for s in self.stages)

    def seed_for(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def fingerprint(self) -> str:
        """Hash of everything except where outputs go and how many workers run."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _from_mapping(data, origin: str) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"{origin}: unsupported schema_version {data.get('schema_version')!r}")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(x) for x in first["loc"])
        raise ConfigError(f"{origin}: {loc}: {first['msg']}") from None
    # build everything once so invalid combinations fail before any work starts
    try:
        cfg.encoder.build()
        cfg.mining.build()
        cfg.ablation.build()
        for s in cfg.stages:
            s.build(0)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{origin}: {e}") from None
    return cfg


def preset_text(name: str) -> str:
    return resources.files("mmret").joinpath("configs", f"{name}.yaml").read_text()


def load_config(path_or_preset, env: Optional[dict] = None) -> RunConfig:
    """Read a YAML file (or a shipped preset name) and apply ``MMRET_*`` overrides."""
    src = str(path_or_preset)
    if src in PRESETS and not Path(src).exists():
        text, origin = preset_text(src), f"preset {src}"
    else:
        p = Path(src)
        if not p.is_file():
            raise ConfigError(f"config file not found: {src}")
        text, origin = p.read_text(), str(p)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{origin}: not valid YAML ({e.__class__.__name__})") from None
    cfg = _from_mapping(data, origin)
    return apply_env(cfg, os.environ if env is None else env)


def apply_env(cfg: RunConfig, env) -> RunConfig:
    updates = {}
    try:
        if ENV_PREFIX + "SEED" in env:
            updates["seed"] = int(env[ENV_PREFIX + "SEED"])
        if ENV_PREFIX + "THREADS" in env:
            updates["threads"] = int(env[ENV_PREFIX + "THREADS"])
    except ValueError as e:
        raise ConfigError(f"bad environment override: {e}") from None
    if ENV_PREFIX + "OUT" in env:
        updates["output_dir"] = env[ENV_PREFIX + "OUT"]
    return with_overrides(cfg, **updates)


def with_overrides(cfg: RunConfig, **updates) -> RunConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    if "threads" in updates and int(updates["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    return _from_mapping({**cfg.to_dict(), **updates}, "overrides")
