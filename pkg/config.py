import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict

from dotenv import dotenv_values

from backbone import BackboneConfig
from data import Preprocess
from encoding import FUSIONS
from errors import ConfigurationError
from network import MulterConfig
from training import TrainingConfig
from utils import coerce_positive_int, parse_levels

# Defaults taken from the published training protocol (directory datasets)
DIRECTORY_DEFAULTS: Dict[str, Any] = {"k": 8, "c": 128, "batch": 32, "resize": 256, "crop": 224}
# Scaled-down defaults for the synthetic texture set
SYNTH_DEFAULTS: Dict[str, Any] = {"k": 4, "c": 32, "batch": 16}

BASE_DEFAULTS: Dict[str, Any] = {
    "data": "synth",
    "levels": "1,2,3,4",
    "branch_dim": 64,
    "fusion": "bilinear",
    "widths": "8,16,32,64",
    "stem_channels": 8,
    "full_size": False,
    "classes": 4,
    "per_class": 50,
    "test_per_class": 20,
    "size": 64,
    "lr": 0.01,
    "momentum": 0.9,
    "epochs": 30,
    "decay_every": 10,
    "decay_factor": 0.1,
    "flip_prob": 0.5,
    "seed": 0,
    "workers": 1,
    "seeds": 1,
    "output_dir": "runs",
    "model": None,
}

ENV_KEYS = {
    "MULTER_SEED": "seed",
    "MULTER_LR": "lr",
    "MULTER_MOMENTUM": "momentum",
    "MULTER_EPOCHS": "epochs",
    "MULTER_BATCH": "batch",
    "MULTER_LEVELS": "levels",
    "MULTER_K": "k",
    "MULTER_C": "c",
    "MULTER_OUTPUT_DIR": "output_dir",
    "MULTER_WORKERS": "workers",
}


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("true", "1", "t", "yes", "y")


def _to_int_list(value: Any) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(item) for item in value.split(",") if item.strip())
    return tuple(int(item) for item in value)


CONVERTERS: Dict[str, Callable[[Any], Any]] = {
    "data": str,
    "levels": parse_levels,
    "k": int,
    "c": int,
    "branch_dim": int,
    "fusion": str,
    "widths": _to_int_list,
    "stem_channels": int,
    "full_size": _to_bool,
    "classes": int,
    "per_class": int,
    "test_per_class": int,
    "size": int,
    "lr": float,
    "momentum": float,
    "epochs": int,
    "batch": int,
    "decay_every": int,
    "decay_factor": float,
    "resize": int,
    "crop": int,
    "flip_prob": float,
    "seed": int,
    "workers": lambda value: coerce_positive_int(value, 1, "workers"),
    "seeds": int,
    "output_dir": str,
    "model": str,
}


@dataclass(frozen=True)
class SynthSettings:
    classes: int = 4
    per_class: int = 50
    test_per_class: int = 20
    size: int = 64


@dataclass
class RunConfig:
    command: str
    data: str
    model: MulterConfig
    training: TrainingConfig
    synth: SynthSettings = field(default_factory=SynthSettings)
    output_dir: Path = Path("runs")
    model_path: Path | None = None
    seeds: int = 1

    @property
    def is_synth(self) -> bool:
        return self.data == "synth"


def env_values() -> Dict[str, str]:
    return {key: os.environ[env] for env, key in ENV_KEYS.items() if os.getenv(env)}


def file_values(path: str | Path | None) -> Dict[str, str]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values = {key.strip().replace("-", "_"): val for key, val in dotenv_values(path).items()}
    unknown = sorted(set(values) - set(CONVERTERS))
    if unknown:
        raise ConfigurationError(f"unknown keys in config file {path}: {', '.join(unknown)}")
    return {key: val for key, val in values.items() if val is not None}


def _convert(values: Dict[str, Any]) -> Dict[str, Any]:
    converted = {}
    for key, raw in values.items():
        if raw is None:
            converted[key] = None
            continue
        try:
            converted[key] = CONVERTERS[key](raw)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid value for '{key}': {raw!r} ({e})")
    return converted


def build_run_config(
    command: str, flags: Dict[str, Any], config_file: str | Path | None = None
) -> RunConfig:
    """Merge defaults < environment < config file < flags into a RunConfig."""
    merged: Dict[str, Any] = dict(BASE_DEFAULTS)
    for layer in (env_values(), file_values(config_file)):
        merged.update(layer)
    merged.update({key: val for key, val in flags.items() if val is not None and key in CONVERTERS})
    values = _convert(merged)

    synth = SynthSettings(
        classes=values["classes"],
        per_class=values["per_class"],
        test_per_class=values["test_per_class"],
        size=values["size"],
    )
    if values["data"] == "synth":
        profile = dict(SYNTH_DEFAULTS, crop=synth.size, resize=Preprocess.for_crop(synth.size).resize_size)
    else:
        profile = dict(DIRECTORY_DEFAULTS)
    for key, default in profile.items():
        if values.get(key) is None:
            values[key] = default

    if values["fusion"] not in FUSIONS:
        raise ConfigurationError(f"fusion must be one of {', '.join(FUSIONS)}")
    if values["seeds"] < 1:
        raise ConfigurationError("seeds must be positive")

    backbone = (
        BackboneConfig.full_size()
        if values["full_size"]
        else BackboneConfig(stem_channels=values["stem_channels"], widths=values["widths"])
    )
    model = MulterConfig(
        backbone=backbone,
        levels=values["levels"],
        num_codewords=values["k"],
        out_dim=values["c"],
        branch_dim=values["branch_dim"],
        fusion=values["fusion"],
        num_classes=synth.classes if values["data"] == "synth" else 1,
    )
    training = TrainingConfig(
        base_lr=values["lr"],
        decay_factor=values["decay_factor"],
        decay_every=values["decay_every"],
        momentum=values["momentum"],
        epochs=values["epochs"],
        batch_size=values["batch"],
        seed=values["seed"],
        resize_size=values["resize"],
        crop_size=values["crop"],
        flip_prob=values["flip_prob"],
        workers=values["workers"],
    )
    return RunConfig(
        command=command,
        data=values["data"],
        model=model,
        training=training,
        synth=synth,
        output_dir=Path(values["output_dir"]),
        model_path=Path(values["model"]) if values["model"] else None,
        seeds=values["seeds"],
    )


def describe_config(run: RunConfig) -> Dict[str, Any]:
    payload = asdict(run)
    payload["output_dir"] = str(run.output_dir)
    payload["model_path"] = str(run.model_path) if run.model_path else None
    return payload
