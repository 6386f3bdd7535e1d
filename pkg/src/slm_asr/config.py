"""Nested run configuration: presets, ``--set`` overrides, canonical hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .frontend import AugmentSpec, MelProfile, SpecAugmentSpec
from .model import ModelConfig
from .trainer import FeaturePipeline, TrainConfig

SEED_ENV = "SLM_ASR_SEED"
RESOLVED_NAME = "resolved_config.yaml"
SECTIONS = ("data", "frontend", "augment", "spec_augment", "model", "train", "eval", "decode", "regimes")


def default_tree() -> dict:
    return {
        "data": {"manifest": None, "audio_root": None, "val_manifest": None, "val_audio_root": None},
        "frontend": asdict(MelProfile()),
        "augment": {"ops": [], "seed": 0},
        "spec_augment": None,
        "model": ModelConfig().to_dict(),
        "train": asdict(TrainConfig()),
        "eval": {"tokenization": "whitespace", "normalize": True},
        "decode": {"context_from_hyps": False, "max_len": None},
        # per-regime partial configs merged over the root when a regime is chosen
        "regimes": {},
    }


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``train.lr=1e-3`` -> (["train", "lr"], 0.001); values parse as YAML scalars."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in override {text!r}: {exc}") from exc
    # YAML 1.1 reads "1e-3" as a string; accept it as a float
    if isinstance(value, str):
        try:
            value = float(value) if any(c in value.lower() for c in ".e") else value
        except ValueError:
            pass
    return key.strip().split("."), value


def apply_override(tree: dict, path: list[str], value) -> None:
    node = tree
    for part in path[:-1]:
        if node.get(part) is None:
            node[part] = {}
        if not isinstance(node[part], dict):
            raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a section")
        node = node[part]
    node[path[-1]] = value


def canonical_json(tree: dict) -> str:
    return json.dumps(tree, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _typed(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    tree: dict = field(default_factory=default_tree)

    # --- typed views --------------------------------------------------------

    def mel_profile(self) -> MelProfile:
        return _typed(MelProfile, self.tree["frontend"], "frontend")

    def augment_spec(self) -> AugmentSpec | None:
        aug = self.tree.get("augment") or {}
        if not aug.get("ops"):
            return None
        return AugmentSpec.from_config(aug["ops"], aug.get("seed", 0))

    def spec_augment_spec(self) -> SpecAugmentSpec | None:
        sa = self.tree.get("spec_augment")
        return None if sa is None else _typed(SpecAugmentSpec, sa, "spec_augment")

    def pipeline(self) -> FeaturePipeline:
        return FeaturePipeline(self.mel_profile(), self.augment_spec(), self.spec_augment_spec())

    def model_config(self) -> ModelConfig:
        model = self.tree["model"]
        top = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(model) - top)
        if unknown:
            raise ConfigError(f"model: unknown key(s) {', '.join(unknown)}")
        try:
            cfg = ModelConfig.from_dict(model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc
        cfg.encoder.n_mels = self.mel_profile().n_mels
        for part in (cfg.encoder, cfg.projector, cfg.lm, cfg.lora):
            if part is not None:
                part.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        train = dict(self.tree["train"])
        if "betas" in train:
            train["betas"] = tuple(train["betas"])
        return _typed(TrainConfig, train, "train")

    # --- identity -----------------------------------------------------------

    def canonical(self) -> str:
        return canonical_json(self.tree)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def get(self, dotted: str):
        node = self.tree
        for part in dotted.split("."):
            node = node[part]
        return node

    def with_regime(self, regime: str | None) -> "RunConfig":
        """Merge the regime's partial config (if any) and set train.regime."""
        tree = copy.deepcopy(self.tree)
        regimes = tree.pop("regimes", {}) or {}
        if regime is not None:
            tree = deep_merge(tree, regimes.get(regime, {}))
            tree["train"]["regime"] = regime
        tree["regimes"] = {}
        return RunConfig(tree)

    def write(self, directory) -> Path:
        """Write the resolved config (plus its hash) next to the outputs."""
        path = Path(directory) / RESOLVED_NAME
        doc = {"config_hash": self.config_hash, **self.tree}
        path.write_text(yaml.safe_dump(doc, sort_keys=True, allow_unicode=True), encoding="utf-8")
        return path


def preset_names() -> list[str]:
    root = resources.files("slm_asr") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_document(ref) -> dict:
    """Load a config file path, or a shipped preset by name (``presets/<name>`` also accepted)."""
    ref = str(ref)
    candidates = [Path(ref), Path(ref + ".yaml")]
    for path in candidates:
        if path.is_file():
            text = path.read_text(encoding="utf-8")
            break
    else:
        name = Path(ref).name.removesuffix(".yaml")
        res = resources.files("slm_asr") / "presets" / f"{name}.yaml"
        if not res.is_file():
            raise ConfigError(f"config {ref!r} is neither a file nor a preset ({', '.join(preset_names())})")
        text = res.read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {ref!r}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {ref!r} must be a mapping")
    doc.pop("config_hash", None)
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"config {ref!r}: unknown section(s) {', '.join(unknown)}")
    return doc


def load_run_config(
    ref: str | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Defaults <- config file/preset <- ``--set`` overrides <- seed.

    The seed comes from ``seed`` when given, else from the SLM_ASR_SEED
    environment variable, else from the config.
    """
    tree = default_tree()
    if ref:
        tree = deep_merge(tree, _read_document(ref))
    for text in overrides or []:
        path, value = parse_override(text)
        if path[0] not in SECTIONS:
            raise ConfigError(f"override {text!r}: unknown section {path[0]!r}")
        apply_override(tree, path, value)
    env = os.environ if env is None else env
    if seed is None and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    if seed is not None:
        tree["train"]["seed"] = int(seed)
    return RunConfig(tree)
