"""Experiment configuration: YAML schema, validation, hashing, run manifests.

Config files state perturbation budgets on the familiar 0-255 pixel scale
(``eps: 8`` means 8/255); they are converted to the model input scale exactly
once, when the typed config objects are built.  ``parse -> serialize -> parse``
is the identity, and ``config_hash`` fingerprints the canonical serialized
form, so manifests can detect config drift at load time.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import yaml

from ..analysis import MetricConfig, ThicknessConfig
from ..attacks import AttackConfig
from ..nfcore.models import ModelConfig
from ..objectives import TrainConfig
from .data import DATASETS

CODE_VERSION = "0.1.0"
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


class ConfigError(ValueError):
    """Config file or config value rejected."""


class ManifestError(RuntimeError):
    """Run manifest missing, unreadable, or inconsistent with its config."""


@dataclass
class EvalConfig:
    """Evaluation-time attack suite, corruption suite, and metric settings."""
    attack_eps: float = 8 / 255
    attack_steps: int = 20
    attack_seed: int = 0
    corruption_severities: tuple = (1, 3, 5)
    corruptions: bool = True
    metrics: MetricConfig = field(default_factory=MetricConfig)
    mbn_gamma: float = 0.5
    mbn_mix_set: tuple = ()

    def __post_init__(self):
        if self.attack_eps < 0:
            raise ConfigError(f"eval attack_eps must be >= 0, got {self.attack_eps}")
        if self.attack_steps <= 0:
            raise ConfigError(f"eval attack_steps must be positive, got {self.attack_steps}")
        if not 0.0 <= self.mbn_gamma <= 1.0:
            raise ConfigError(f"mbn_gamma must lie in [0, 1], got {self.mbn_gamma}")
        for s in self.corruption_severities:
            if not 1 <= int(s) <= 5:
                raise ConfigError(f"corruption severities must lie in 1..5, got {s}")


@dataclass
class ExperimentConfig:
    """Everything one run needs: dataset, model, training method, evaluation."""
    name: str = "run"
    dataset: str = "synthetic_moons_images"
    dataset_params: dict = field(default_factory=dict)
    subset_fraction: float = 1.0
    data_seed: int = 0
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ConfigError(
                f"run name {self.name!r} must match {_NAME_RE.pattern} (filesystem-safe)")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")


# ---------------------------------------------------------------------------
# dict <-> dataclass with pixel-scale conversion

def _px(v):
    """Input-scale budget -> pixel-scale value for serialization."""
    return None if v is None else round(v * 255.0, 10)


def _from_px(v):
    return None if v is None else v / 255.0


def _attack_to_dict(cfg: AttackConfig) -> dict:
    d = asdict(cfg)
    d["eps"] = _px(cfg.eps)
    d["step_size"] = _px(cfg.step_size)
    d["pixel_range"] = list(cfg.pixel_range)
    return d


def _attack_from_dict(d: dict) -> AttackConfig:
    d = dict(d)
    _reject_unknown(d, AttackConfig, "attack")
    if "eps" in d:
        d["eps"] = _from_px(d["eps"])
    if "step_size" in d:
        d["step_size"] = _from_px(d["step_size"])
    if "pixel_range" in d:
        d["pixel_range"] = tuple(d["pixel_range"])
    return AttackConfig(**d)


def _reject_unknown(d: dict, cls, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) under '{where}': {unknown}")


def _thickness_to_dict(cfg: ThicknessConfig) -> dict:
    d = asdict(cfg)
    d["attack_eps"] = _px(cfg.attack_eps)
    d["attack_step_size"] = _px(cfg.attack_step_size)
    return d


def _thickness_from_dict(d: dict) -> ThicknessConfig:
    d = dict(d)
    _reject_unknown(d, ThicknessConfig, "eval.metrics.thickness")
    if "attack_eps" in d:
        d["attack_eps"] = _from_px(d["attack_eps"])
    if "attack_step_size" in d:
        d["attack_step_size"] = _from_px(d["attack_step_size"])
    return ThicknessConfig(**d)


def _metrics_to_dict(cfg: MetricConfig) -> dict:
    return {"n_samples": cfg.n_samples, "max_classes": cfg.max_classes,
            "thickness_samples": cfg.thickness_samples,
            "thickness": _thickness_to_dict(cfg.thickness),
            "smoothness_attack": _attack_to_dict(cfg.smoothness_attack)}


def _metrics_from_dict(d: dict) -> MetricConfig:
    d = dict(d)
    _reject_unknown(d, MetricConfig, "eval.metrics")
    if "thickness" in d:
        d["thickness"] = _thickness_from_dict(d["thickness"])
    if "smoothness_attack" in d:
        d["smoothness_attack"] = _attack_from_dict(d["smoothness_attack"])
    return MetricConfig(**d)


def _train_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["method"] = cfg.method.value
    d["lambda"] = d.pop("lam")
    d["attack"] = _attack_to_dict(cfg.attack)
    d["eval_attack"] = None if cfg.eval_attack is None else _attack_to_dict(cfg.eval_attack)
    return d


def _train_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    _reject_unknown(d, TrainConfig, "train")
    if "attack" in d:
        d["attack"] = _attack_from_dict(d["attack"])
    if d.get("eval_attack") is not None:
        d["eval_attack"] = _attack_from_dict(d["eval_attack"])
    return TrainConfig(**d)


def _model_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    _reject_unknown(d, ModelConfig, "model")
    return ModelConfig(**d)


def _eval_to_dict(cfg: EvalConfig) -> dict:
    return {"attack_eps": _px(cfg.attack_eps), "attack_steps": cfg.attack_steps,
            "attack_seed": cfg.attack_seed,
            "corruption_severities": list(cfg.corruption_severities),
            "corruptions": cfg.corruptions,
            "metrics": _metrics_to_dict(cfg.metrics),
            "mbn_gamma": cfg.mbn_gamma,
            "mbn_mix_set": list(cfg.mbn_mix_set)}


def _eval_from_dict(d: dict) -> EvalConfig:
    d = dict(d)
    _reject_unknown(d, EvalConfig, "eval")
    if "attack_eps" in d:
        d["attack_eps"] = _from_px(d["attack_eps"])
    if "corruption_severities" in d:
        d["corruption_severities"] = tuple(d["corruption_severities"])
    if "mbn_mix_set" in d:
        d["mbn_mix_set"] = tuple(d["mbn_mix_set"])
    if "metrics" in d:
        d["metrics"] = _metrics_from_dict(d["metrics"])
    return EvalConfig(**d)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    model = {**asdict(cfg.model), "norm": cfg.model.norm.value}
    if model.get("input_mean") is not None:
        model["input_mean"] = list(model["input_mean"])
        model["input_std"] = list(model["input_std"])
    d["model"] = model
    d["train"] = _train_to_dict(cfg.train)
    d["eval"] = _eval_to_dict(cfg.eval)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"config root must be a mapping, got {type(d).__name__}")
    d = dict(d)
    _reject_unknown(d, ExperimentConfig, "top level")
    try:
        if "model" in d:
            d["model"] = _model_from_dict(d["model"])
        if "train" in d:
            d["train"] = _train_from_dict(d["train"])
        if "eval" in d:
            d["eval"] = _eval_from_dict(d["eval"])
        return ExperimentConfig(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def from_yaml(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_yaml(path.read_text())


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def set_by_path(d: dict, dotted: str, value):
    """Apply one ``a.b.c=value`` override to a nested config dict (in place)."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            raise ConfigError(f"override path {dotted!r}: {k!r} is not a mapping")
        cur = cur[k]
    cur[keys[-1]] = yaml.safe_load(value)


# ---------------------------------------------------------------------------
# run manifests

@dataclass
class RunManifest:
    """Provenance record written into every run directory."""
    config_hash: str
    seed: int
    code_version: str = CODE_VERSION
    status: str = "running"
    started_at: str = ""
    finished_at: str | None = None
    artifacts: dict = field(default_factory=dict)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def save_manifest(manifest: RunManifest, run_dir) -> Path:
    path = Path(run_dir) / "manifest.json"
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True))
    return path


def load_manifest(run_dir) -> RunManifest:
    """Load and verify a manifest: the stored config must hash to the stored value."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    cpath = run_dir / "config.yaml"
    if not mpath.exists():
        raise ManifestError(f"no manifest.json under {run_dir}")
    manifest = RunManifest(**json.loads(mpath.read_text()))
    if not cpath.exists():
        raise ManifestError(f"no config.yaml next to {mpath}")
    recomputed = config_hash(from_yaml(cpath.read_text()))
    if recomputed != manifest.config_hash:
        raise ManifestError(
            f"config drift in {run_dir}: stored hash {manifest.config_hash[:12]}... "
            f"!= recomputed {recomputed[:12]}...")
    return manifest
