"""Run configuration: one INI file describing a full experiment.

The layout mirrors the dataclasses field for field; ``parse_config``
and ``serialize_config`` are exact inverses for any valid config (floats
round-trip through shortest-repr formatting).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .losses import DefenseLossConfig
from .train import AdversarialTrainingConfig, TrainConfig

__all__ = [
    "DatasetConfig",
    "ModelConfig",
    "AttackSpec",
    "AnalysisConfig",
    "RunConfig",
    "ConfigError",
    "parse_config",
    "serialize_config",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Malformed configuration file or field value."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"  # blobs | moons | digits | idx | csv
    n: int = 600  # total synthetic samples (train_count + test_count is typical)
    noise: float = 0.05
    path: str = ""  # idx images / csv file
    labels_path: str = ""  # idx labels
    normalize: bool = False  # csv min-max rescaling
    train_count: int = 2000
    test_count: int = 500

    def __post_init__(self):
        if self.kind not in ("blobs", "moons", "digits", "idx", "csv"):
            raise ConfigError(f"unknown dataset kind '{self.kind}'")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"  # mlp | conv
    hidden: int = 256
    embedding_dim: int = 64
    slope: float = 0.1
    conv_channels: tuple[int, int] = (16, 32)

    def __post_init__(self):
        if self.kind not in ("mlp", "conv"):
            raise ConfigError(f"unknown model kind '{self.kind}'")


@dataclass(frozen=True)
class AttackSpec:
    """One attack family / budget entry in the evaluation list."""

    family: str
    epsilon: float
    iterations: int = 10

    def __post_init__(self):
        if self.family not in ("fgsm", "bim", "pgd", "cw"):
            raise ConfigError(f"unknown attack family '{self.family}'")

    def encode(self) -> str:
        return f"{self.family}:{repr(self.epsilon)}:{self.iterations}"

    @classmethod
    def decode(cls, text: str) -> "AttackSpec":
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"attack spec '{text}' is not family:epsilon:iterations")
        try:
            return cls(parts[0], float(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"attack spec '{text}': {exc}") from None


@dataclass(frozen=True)
class AnalysisConfig:
    margin_cap: int = 1000
    sample_count: int = 500  # test samples fed to margin / separability / attacks
    jacobian_chunk: int = 32
    distill: bool = False
    distill_probes: int = 1000
    distill_epochs: int = 30
    distill_mode: str = "soft"
    attack_workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    attacks: tuple[AttackSpec, ...] = (AttackSpec("pgd", 0.1, 10),)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


# ---------------------------------------------------------------------------
# typed (de)serialization driven by the dataclass fields
# ---------------------------------------------------------------------------

def _encode_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_encode_value(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _decode_value(text: str, kind, name: str):
    text = text.strip()
    try:
        if kind is bool:
            if text not in ("true", "false"):
                raise ValueError(f"expected true/false, got '{text}'")
            return text == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        raise ValueError(f"unsupported field type {kind}")
    except ValueError as exc:
        raise ConfigError(f"field '{name}': {exc}") from None


def _section_from(obj, skip=()) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        out[f.name] = _encode_value(getattr(obj, f.name))
    return out


def _build(cls, section: configparser.SectionProxy, overrides: dict | None = None):
    kwargs = dict(overrides or {})
    for f in fields(cls):
        if f.name in kwargs:
            continue
        if f.name not in section:
            continue
        raw = section[f.name]
        if f.type in ("int", "float", "str", "bool"):
            kwargs[f.name] = _decode_value(raw, {"int": int, "float": float, "str": str, "bool": bool}[f.type], f.name)
        elif f.name == "decay_points":
            kwargs[f.name] = tuple(float(p) for p in raw.split(",") if p.strip())
        elif f.name == "conv_channels":
            kwargs[f.name] = tuple(int(p) for p in raw.split(",") if p.strip())
        elif f.name == "jacobian_samples":
            kwargs[f.name] = None if raw.strip() == "" else int(raw)
        elif f.name == "step":
            kwargs[f.name] = None if raw.strip() == "" else float(raw)
        else:
            raise ConfigError(f"unhandled config field '{f.name}'")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def serialize_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {"seed": str(cfg.seed), "out_dir": cfg.out_dir}
    cp["dataset"] = _section_from(cfg.dataset)
    cp["model"] = _section_from(cfg.model)
    cp["training"] = _section_from(cfg.training, skip=("loss", "adversarial"))
    cp["loss"] = _section_from(cfg.training.loss)
    adv = cfg.training.adversarial
    cp["adversarial"] = {"enabled": "true" if adv else "false"}
    if adv:
        cp["adversarial"].update(_section_from(adv))
    cp["attacks"] = {"specs": ", ".join(a.encode() for a in cfg.attacks)}
    cp["analysis"] = _section_from(cfg.analysis)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None

    def section(name):
        return cp[name] if cp.has_section(name) else cp["DEFAULT"]

    run = section("run")
    seed = _decode_value(run.get("seed", "0"), int, "seed")
    out_dir = run.get("out_dir", "out")

    dataset = _build(DatasetConfig, section("dataset"))
    model = _build(ModelConfig, section("model"))
    loss = _build(DefenseLossConfig, section("loss"))
    adv_sec = section("adversarial")
    adversarial = None
    if adv_sec.get("enabled", "false") == "true":
        adversarial = _build(AdversarialTrainingConfig, adv_sec)
    training = _build(TrainConfig, section("training"), {"loss": loss, "adversarial": adversarial})

    specs_raw = section("attacks").get("specs", "").strip()
    attacks = tuple(
        AttackSpec.decode(s) for s in specs_raw.split(",") if s.strip()
    ) if specs_raw else ()
    analysis = _build(AnalysisConfig, section("analysis"))
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        dataset=dataset,
        model=model,
        training=training,
        attacks=attacks,
        analysis=analysis,
    )


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))
