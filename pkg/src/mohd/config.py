"""Run configuration: typed dataclasses plus the INI-style file format.

A run file has four sections, ``[model]``, ``[router]``, ``[train]``, and
``[analysis]``. Unknown sections or keys are rejected, every value is
type-checked, and structural constraints (sub-dimension integrality, head
geometry, fusion block size) are validated at load time so commands can
fail fast with a field-level message.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "AnalysisConfig",
    "RunConfig",
    "parse_config",
    "render_config",
    "apply_overrides",
    "config_to_dict",
    "config_from_dict",
]


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``d_base`` is the baseline hidden width; the residual stream runs at
    ``d = expansion * d_base`` while attention and FFN inner widths stay at
    baseline scale, so expansion with ``delta = 1/expansion`` keeps the
    per-token activated parameter count constant.
    """

    arch: str = "mohd"  # "mohd" or "vanilla"
    d_base: int = 64
    expansion: int = 1
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    depth: int = 4
    vocab_size: int = 257
    fusion_r: int = 8
    norm_eps: float = 1e-5
    attn_subdims: int = 8
    attn_delta: float = 0.75
    attn_shared: float = 0.5
    ffn_subdims: int = 8
    ffn_delta: float = 0.75
    ffn_shared: float = 0.5
    balance_beta: float = 0.01

    @property
    def d(self) -> int:
        return self.d_base * self.expansion

    @property
    def attn_width(self) -> int:
        return self.heads * self.head_dim


@dataclass
class TrainConfig:
    corpus: str = ""
    seq_len: int = 128
    batch_size: int = 16
    steps: int = 200
    lr: float = 3e-4
    seed: int = 0
    eval_interval: int = 50
    checkpoint_dir: str = "runs/default"


@dataclass
class AnalysisConfig:
    eps: float = 1e-4  # near-zero threshold on squared activations


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


_SECTIONS = {
    "model": ("model", ModelConfig),
    "router": ("model", ModelConfig),
    "train": ("train", TrainConfig),
    "analysis": ("analysis", AnalysisConfig),
}

_ROUTER_KEYS = (
    "attn_subdims",
    "attn_delta",
    "attn_shared",
    "ffn_subdims",
    "ffn_delta",
    "ffn_shared",
    "balance_beta",
)

_MODEL_KEYS = (
    "arch",
    "d_base",
    "expansion",
    "heads",
    "head_dim",
    "ffn_dim",
    "depth",
    "vocab_size",
    "fusion_r",
    "norm_eps",
)


def _section_keys(section: str) -> tuple[str, ...]:
    if section == "model":
        return _MODEL_KEYS
    if section == "router":
        return _ROUTER_KEYS
    _, cls = _SECTIONS[section]
    return tuple(f.name for f in fields(cls))


def _coerce(section: str, key: str, raw: str):
    _, cls = _SECTIONS[section]
    ftype = {f.name: f.type for f in fields(cls)}[key]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {ftype}") from None


def parse_config(text: str) -> RunConfig:
    """Parse run-file text into a validated RunConfig."""
    parser = configparser.ConfigParser(
        strict=True, interpolation=None, default_section="\0"
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, _ = _SECTIONS[section]
        allowed = _section_keys(section)
        target = getattr(cfg, attr)
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, key, raw))
    validate(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text)


def render_config(cfg: RunConfig) -> str:
    """Render a RunConfig as file text; ``parse_config`` inverts this exactly."""
    out = io.StringIO()
    values = {
        "model": {k: getattr(cfg.model, k) for k in _MODEL_KEYS},
        "router": {k: getattr(cfg.model, k) for k in _ROUTER_KEYS},
        "train": {k: getattr(cfg.train, k) for k in _section_keys("train")},
        "analysis": {k: getattr(cfg.analysis, k) for k in _section_keys("analysis")},
    }
    for section, kv in values.items():
        out.write(f"[{section}]\n")
        for key, value in kv.items():
            text = repr(value) if isinstance(value, float) else str(value)
            out.write(f"{key} = {text}\n")
        out.write("\n")
    return out.getvalue()


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a parsed config."""
    cfg = replace(
        cfg,
        model=replace(cfg.model),
        train=replace(cfg.train),
        analysis=replace(cfg.analysis),
    )
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, raw = item.split("=", 1)
        section, key = path.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}] in override {item!r}")
        if key not in _section_keys(section):
            raise ConfigError(f"unknown key {section}.{key} in override {item!r}")
        attr, _ = _SECTIONS[section]
        setattr(getattr(cfg, attr), key, _coerce(section, key, raw.strip()))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, t = cfg.model, cfg.train
    if m.arch not in ("mohd", "vanilla"):
        raise ConfigError(f"model.arch: expected 'mohd' or 'vanilla', got {m.arch!r}")
    for key in ("d_base", "heads", "head_dim", "ffn_dim", "depth", "vocab_size", "fusion_r"):
        if getattr(m, key) < 1:
            raise ConfigError(f"model.{key} must be positive")
    if m.expansion < 1:
        raise ConfigError("model.expansion must be >= 1")
    if m.heads * m.head_dim != m.d_base:
        raise ConfigError(
            f"model.heads * model.head_dim = {m.heads * m.head_dim} "
            f"must equal d_base = {m.d_base}"
        )
    if m.arch == "vanilla":
        if m.expansion != 1:
            raise ConfigError("model.expansion must be 1 for the vanilla architecture")
    else:
        if m.d % m.fusion_r != 0:
            raise ConfigError(
                f"model.fusion_r = {m.fusion_r} must divide hidden width d = {m.d}"
            )
        for comp in ("attn", "ffn"):
            n = getattr(m, f"{comp}_subdims")
            delta = getattr(m, f"{comp}_delta")
            shared = getattr(m, f"{comp}_shared")
            if m.d % n != 0:
                raise ConfigError(
                    f"router.{comp}_subdims = {n} must divide hidden width d = {m.d}"
                )
            if not 0.0 < delta <= 1.0:
                raise ConfigError(f"router.{comp}_delta = {delta} outside (0, 1]")
            if abs(delta * n - round(delta * n)) > 1e-9:
                raise ConfigError(
                    f"router.{comp}_delta = {delta} times {n} sub-dimensions "
                    "is not an integer"
                )
            if not 0.0 <= shared <= delta:
                raise ConfigError(
                    f"router.{comp}_shared = {shared} outside [0, {comp}_delta]"
                )
            if abs(shared * n - round(shared * n)) > 1e-9:
                raise ConfigError(
                    f"router.{comp}_shared = {shared} times {n} sub-dimensions "
                    "is not an integer"
                )
            if m.expansion > 1 and abs(delta * m.expansion - 1.0) > 1e-9:
                raise ConfigError(
                    f"router.{comp}_delta = {delta} must equal 1/expansion "
                    f"= {1.0 / m.expansion} to keep activation constant"
                )
    if m.balance_beta < 0:
        raise ConfigError("router.balance_beta must be >= 0")
    if t.seq_len < 2:
        raise ConfigError("train.seq_len must be >= 2")
    if t.steps < 1:
        raise ConfigError("train.steps must be >= 1")
    if t.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    if t.lr <= 0:
        raise ConfigError("train.lr must be positive")
    if t.eval_interval < 1:
        raise ConfigError("train.eval_interval must be >= 1")
    if cfg.analysis.eps <= 0:
        raise ConfigError("analysis.eps must be positive")


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "model": {f.name: getattr(cfg.model, f.name) for f in fields(ModelConfig)},
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)},
        "analysis": {
            f.name: getattr(cfg.analysis, f.name) for f in fields(AnalysisConfig)
        },
    }


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig(
        model=ModelConfig(**data["model"]),
        train=TrainConfig(**data["train"]),
        analysis=AnalysisConfig(**data.get("analysis", {})),
    )
    validate(cfg)
    return cfg
