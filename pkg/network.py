import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from backbone import (
    NUM_STAGES,
    BackboneConfig,
    BackboneParams,
    backbone_forward,
    init_backbone,
    trace_backbone_shapes,
)
from encoding import FUSIONS, Fusion, LemConfig, LemParams, init_lem, lem_forward
from errors import ConfigurationError, DataError, DimensionError
from layers import LinearParams, init_linear, load_state_arrays, state_arrays
from tensor import Mode, Tensor, as_tensor, concat

MODEL_FORMAT = "multer-model/1"
HEADER_MEMBER = "header.json"
ALL_LEVELS = tuple(range(1, NUM_STAGES + 1))
_ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class MulterConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    levels: tuple[int, ...] = ALL_LEVELS
    num_codewords: int = 4
    out_dim: int = 32
    branch_dim: int = 64
    fusion: Fusion = "bilinear"
    num_classes: int = 4

    def __post_init__(self):
        levels = tuple(sorted(set(int(level) for level in self.levels)))
        if not levels or any(level not in ALL_LEVELS for level in levels):
            raise ConfigurationError(
                f"level set must be a nonempty subset of {{1,2,3,4}}, got {list(self.levels)}"
            )
        object.__setattr__(self, "levels", levels)
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"unknown fusion '{self.fusion}'")

    def lem_config(self, level: int) -> LemConfig:
        return LemConfig(
            channels=self.backbone.widths[level - 1],
            num_codewords=self.num_codewords,
            branch_dim=self.branch_dim,
            out_dim=self.out_dim,
            fusion=self.fusion,
        )

    @property
    def feature_dim(self) -> int:
        return len(self.levels) * self.out_dim


@dataclass
class MulterParams:
    config: MulterConfig
    backbone: BackboneParams
    lems: dict[int, LemParams]
    classifier: LinearParams

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.backbone.named_parameters(prefix)
        for level in self.config.levels:
            yield from self.lems[level].named_parameters(f"{prefix}lem{level}")
        yield from self.classifier.named_parameters(f"{prefix}classifier")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield from self.backbone.named_buffers(prefix)
        for level in self.config.levels:
            yield from self.lems[level].named_buffers(f"{prefix}lem{level}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


@dataclass
class MulterModel:
    params: MulterParams
    class_names: list[str]

    @property
    def config(self) -> MulterConfig:
        return self.params.config


def init_multer(config: MulterConfig, rng: np.random.Generator) -> MulterParams:
    backbone = init_backbone(config.backbone, rng)
    lems = {level: init_lem(config.lem_config(level), rng) for level in config.levels}
    classifier = init_linear(rng, config.feature_dim, config.num_classes)
    return MulterParams(config=config, backbone=backbone, lems=lems, classifier=classifier)


def multer_features(image, params: MulterParams, mode: Mode) -> Tensor:
    """Concatenated per-level LEM outputs, ``B x |L|*C``, ascending by level."""
    config = params.config
    image = as_tensor(image)
    stages = backbone_forward(image, params.backbone, mode, max_level=max(config.levels))
    outputs = [lem_forward(stages[level - 1], params.lems[level], mode) for level in config.levels]
    return outputs[0] if len(outputs) == 1 else concat(outputs, axis=1)


def multer_forward(image, params: MulterParams, mode: Mode) -> Tensor:
    return params.classifier(multer_features(image, params, mode))


def predicted_classes(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties resolve to the lowest index
    return np.argmax(np.asarray(logits), axis=-1)


def predict(image, params: MulterParams) -> np.ndarray:
    return predicted_classes(multer_forward(image, params, "eval").data)


def trace_shapes(config: MulterConfig, height: int, width: int | None = None) -> dict[str, object]:
    """Propagate shapes through the whole network symbolically."""
    width = height if width is None else width
    trace: dict[str, object] = dict(trace_backbone_shapes(config.backbone, height, width))
    for level in config.levels:
        lem = config.lem_config(level)
        channels, h, w = trace[f"res{level}"]
        trace[f"lem{level}"] = {
            "descriptors": (h * w, channels),
            "encoding": lem.encoding_dim,
            "branch": lem.branch_dim,
            "fused": lem.fused_dim,
            "output": lem.out_dim,
        }
    trace["classifier"] = (config.feature_dim, config.num_classes)
    return trace


def _config_header(model: MulterModel) -> dict:
    config = model.config
    return {
        "format": MODEL_FORMAT,
        "levels": list(config.levels),
        "num_codewords": config.num_codewords,
        "out_dim": config.out_dim,
        "branch_dim": config.branch_dim,
        "fusion": config.fusion,
        "num_classes": config.num_classes,
        "backbone": asdict(config.backbone),
        "class_names": list(model.class_names),
    }


def save_model(model: MulterModel, path: str | Path):
    arrays = state_arrays(model.params)
    header = _config_header(model)
    header["shapes"] = {name: list(arrays[name].shape) for name in sorted(arrays)}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        archive.writestr(
            zipfile.ZipInfo(HEADER_MEMBER, date_time=_ZIP_TIMESTAMP),
            json.dumps(header, sort_keys=True, indent=2),
        )
        for name in sorted(arrays):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            archive.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_TIMESTAMP), buffer.getvalue())
    logging.info(f"Saved model with {len(arrays)} arrays to {path}")


def load_model(path: str | Path) -> MulterModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    try:
        with zipfile.ZipFile(path) as archive:
            header = json.loads(archive.read(HEADER_MEMBER))
            arrays = {
                name[: -len(".npy")]: np.lib.format.read_array(io.BytesIO(archive.read(name)))
                for name in archive.namelist()
                if name.endswith(".npy")
            }
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"{path} is not a model file: {e}")

    if header.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: unsupported model format {header.get('format')!r}")

    backbone = header["backbone"]
    config = MulterConfig(
        backbone=BackboneConfig(**backbone),
        levels=tuple(header["levels"]),
        num_codewords=header["num_codewords"],
        out_dim=header["out_dim"],
        branch_dim=header["branch_dim"],
        fusion=header["fusion"],
        num_classes=header["num_classes"],
    )
    params = init_multer(config, np.random.default_rng(0))
    try:
        load_state_arrays(params, arrays)
    except DimensionError as e:
        raise DataError(f"{path}: {e}")
    logging.debug(f"Loaded model from {path}", extra={"header": header})
    return MulterModel(params=params, class_names=list(header["class_names"]))
