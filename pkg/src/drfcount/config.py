"""JSON run configuration with a strict schema.

Unknown keys are errors at every level: a misspelled hyperparameter should
fail loudly, not train silently with a default.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .dilated import TransformParams
from .models import ModelConfig
from .synthetic import SceneParams
from .training import PipelineConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SweepConfig:
    gammas: list = field(default_factory=lambda: [1.0, 5.0, 10.0, 15.0, 20.0])
    dilations: list = field(default_factory=lambda: [1.0, 2.0])
    epochs: int = 0  # 0 means reuse the teacher stage's epoch count


@dataclass
class RunConfig:
    seed: int
    n_train: int
    n_test: int
    data_dir: str  # empty string: generate data on the fly
    scene: SceneParams
    pipeline: PipelineConfig
    sweep: SweepConfig


def _build(cls, payload, where):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where!r}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where!r} section: {e}") from e


_TOP_KEYS = {
    "seed",
    "data_dir",
    "data",
    "scene",
    "density",
    "transform",
    "rough_model",
    "precise_model",
    "train",
    "sweep",
}
_DATA_KEYS = {"n_train", "n_test"}
_DENSITY_KEYS = {"downsample", "sigma_precise", "sigma_rough", "adaptive_sigma", "knn_k", "knn_beta"}
_TRAIN_STAGES = ("rough", "teacher", "student")


def parse_config(payload, seed_override=None):
    """Validate a parsed JSON object and assemble a RunConfig."""
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(payload) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")

    seed = payload.get("seed", 0)
    if seed_override is not None:
        seed = seed_override
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    data = dict(payload.get("data", {}))
    unknown = sorted(set(data) - _DATA_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in 'data'")
    n_train = data.get("n_train", 200)
    n_test = data.get("n_test", 50)

    scene_payload = dict(payload.get("scene", {}))
    if "seed" in scene_payload:
        raise ConfigError("scene seed is derived from the master seed; remove 'scene.seed'")
    scene = _build(SceneParams, {**scene_payload, "seed": seed}, "scene")

    density = dict(payload.get("density", {}))
    unknown = sorted(set(density) - _DENSITY_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in 'density'")

    transform = _build(TransformParams, dict(payload.get("transform", {})), "transform")
    rough_model = _build(ModelConfig, dict(payload.get("rough_model", {})), "rough_model")
    precise_model = _build(ModelConfig, dict(payload.get("precise_model", {})), "precise_model")

    train = dict(payload.get("train", {}))
    unknown = sorted(set(train) - set(_TRAIN_STAGES))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in 'train'")
    stage_cfgs = {}
    for i, stage in enumerate(_TRAIN_STAGES):
        stage_payload = dict(train.get(stage, {}))
        stage_payload.setdefault("seed", seed + i + 1)
        stage_cfgs[stage] = _build(TrainConfig, stage_payload, f"train.{stage}")

    try:
        pipeline = PipelineConfig(
            seed=seed,
            downsample=density.get("downsample", 8),
            sigma_precise=density.get("sigma_precise", 15.0),
            sigma_rough=density.get("sigma_rough", 50.0),
            adaptive_sigma=density.get("adaptive_sigma", False),
            knn_k=density.get("knn_k", 3),
            knn_beta=density.get("knn_beta", 0.3),
            transform=transform,
            rough_model=rough_model,
            precise_model=precise_model,
            rough_train=stage_cfgs["rough"],
            teacher_train=stage_cfgs["teacher"],
            student_train=stage_cfgs["student"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

    sweep = _build(SweepConfig, dict(payload.get("sweep", {})), "sweep")

    return RunConfig(
        seed=seed,
        n_train=n_train,
        n_test=n_test,
        data_dir=payload.get("data_dir", ""),
        scene=scene,
        pipeline=pipeline,
        sweep=sweep,
    )


def load_config(path, seed_override=None):
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return parse_config(payload, seed_override=seed_override)
