"""Two-stage self-distilled training.

Stage 1 trains a teacher on Gaussian annotation targets. Its predictions,
rescaled per image so each sums to the annotated count, become the targets
for stage 2, where a student initialized from the teacher's parameters is
finetuned. A separately trained rough network supplies the dilation maps
that both precise-network stages consume.
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .density import DensityMap, adaptive_sigmas, downsample_preserve_count, gaussian_density
from .dilated import TransformParams, linear_transform
from .metrics import evaluate
from .models import ModelConfig, build_model
from .optim import Adam

# Below this predicted total, count correction would divide by ~0 and the
# Gaussian annotation map is used instead.
FALLBACK_EPSILON = 1e-9


def worker_count():
    """Worker cap for batch-parallel inference, from env var DRF_THREADS."""
    raw = os.environ.get("DRF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DRF_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"DRF_THREADS must be >= 1, got {n}")
    return n


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-5
    weight_decay: float = 1e-4
    seed: int = 0
    flip: bool = True
    random_crop: bool = False
    crop_size: int = 0  # pixels; required when random_crop is set

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.random_crop and self.crop_size < 1:
            raise ValueError("random_crop requires a positive crop_size")


@dataclass
class DistillSet:
    """Count-corrected teacher predictions plus their provenance."""

    maps: list  # DensityMap per image, 1/8 scale
    teacher_id: str
    ratios: list  # correction ratio applied per image
    fallbacks: list  # True where the Gaussian annotation was used instead


def state_digest(state):
    """Stable content hash of a named-parameter dict."""
    h = hashlib.sha256()
    for name in state:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(state[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _stack_rates(dmaps, idx):
    return np.stack([dmaps[i].rates for i in idx])


def train_stage(model, images, targets, cfg, dmaps=None):
    """Minibatch Adam on the mean-absolute-error loss.

    ``targets`` are density maps on the model's output grid; ``dmaps``
    (one per image) are required exactly when the model is precise.
    Shuffling and augmentation draw from one seeded stream, so a fixed
    seed reproduces the loss history bit for bit. Returns the model and
    the per-epoch mean loss.
    """
    if (model.role == "precise") != (dmaps is not None):
        raise ValueError(f"dilation maps are required iff the model is precise (role={model.role})")
    if len(images) != len(targets):
        raise ValueError(f"{len(images)} images vs {len(targets)} targets")
    ds = model.config.downsample
    for img, t in zip(images, targets):
        want = (img.shape[0] // ds, img.shape[1] // ds)
        if t.values.shape != want:
            raise ValueError(
                f"target grid {t.values.shape} does not match model output {want} "
                f"(downsample {ds})"
            )
        if t.scale != 1.0 / ds:
            raise ValueError(f"target scale {t.scale} does not match 1/{ds}")

    history = []
    if cfg.epochs == 0:
        return model, history

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(images)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb, rb = [], [], []
            for i in idx:
                img = images[i]
                tgt = targets[i].values
                rates = dmaps[i].rates if dmaps is not None else None
                if cfg.random_crop:
                    img, tgt, rates = _random_crop(img, tgt, rates, cfg.crop_size, ds, rng)
                if cfg.flip and rng.random() < 0.5:
                    img = img[:, ::-1]
                    tgt = tgt[:, ::-1]
                    if rates is not None:
                        rates = rates[:, ::-1]
                xb.append(img)
                yb.append(tgt)
                if rates is not None:
                    rb.append(rates)
            x = T.Tensor(np.stack(xb)[:, None])
            y = T.Tensor(np.stack(yb)[:, None])
            batch_rates = np.stack(rb) if rb else None
            pred = model.forward(x, dmap=batch_rates)
            loss = T.l1_loss(pred, y)
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
        history.append(total_loss / n)
    return model, history


def _random_crop(img, tgt, rates, crop, ds, rng):
    """Crop aligned to the downsample grid so targets crop cleanly."""
    H, W = img.shape
    if crop > min(H, W):
        raise ValueError(f"crop size {crop} exceeds image size {(H, W)}")
    if crop % ds:
        raise ValueError(f"crop size {crop} must be a multiple of the downsample factor {ds}")
    oy = ds * int(rng.integers(0, (H - crop) // ds + 1))
    ox = ds * int(rng.integers(0, (W - crop) // ds + 1))
    img = img[oy : oy + crop, ox : ox + crop]
    c = crop // ds
    ty, tx = oy // ds, ox // ds
    tgt = tgt[ty : ty + c, tx : tx + c]
    if rates is not None:
        rates = rates[ty : ty + c, tx : tx + c]
    return img, tgt, rates


def batch_infer(model, images, dmaps=None, batch_size=16):
    """Full-image inference (no augmentation); returns one 2-D array per image.

    Chunks may run on multiple threads (capped by DRF_THREADS); outputs are
    assembled by index, so results are schedule-independent.
    """
    chunks = [list(range(i, min(i + batch_size, len(images)))) for i in range(0, len(images), batch_size)]

    def run(idx):
        x = T.Tensor(np.stack([images[i] for i in idx])[:, None])
        rates = _stack_rates(dmaps, idx) if dmaps is not None else None
        out = model.forward(x, dmap=rates)
        return [out.data[k, 0] for k in range(len(idx))]

    workers = worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return [m for chunk in results for m in chunk]


def count_correction(refined, annotation_map):
    """Rescale a predicted map so its total matches the annotated count.

    Multiplying every cell by (annotated total / predicted total) fixes the
    count while preserving the ratio between any two positive cells. A
    near-zero predicted total falls back to the annotation map itself.
    """
    if refined.values.shape != annotation_map.values.shape:
        raise ValueError(
            f"map shapes differ: {refined.values.shape} vs {annotation_map.values.shape}"
        )
    total = refined.total()
    if total <= FALLBACK_EPSILON:
        return DensityMap(annotation_map.values.copy(), scale=annotation_map.scale)
    ratio = annotation_map.total() / total
    return DensityMap(refined.values * ratio, scale=refined.scale)


def distill_targets(teacher, images, dmaps, annotation_maps):
    """Teacher inference plus per-image count correction.

    Inference runs on uncropped, unaugmented images so the refined targets
    align with the full annotation maps.
    """
    if teacher.role != "precise":
        raise ValueError(f"distillation needs a precise teacher, got role {teacher.role!r}")
    ds = teacher.config.downsample
    raw = batch_infer(teacher, images, dmaps=dmaps)
    maps, ratios, fallbacks = [], [], []
    for pred, ann_map in zip(raw, annotation_maps):
        pred_map = DensityMap(pred, scale=1.0 / ds)
        fallback = pred_map.total() <= FALLBACK_EPSILON
        corrected = count_correction(pred_map, ann_map)
        maps.append(corrected)
        ratios.append(1.0 if fallback else ann_map.total() / pred_map.total())
        fallbacks.append(fallback)
    return DistillSet(
        maps=maps,
        teacher_id=state_digest(teacher.state()),
        ratios=ratios,
        fallbacks=fallbacks,
    )


@dataclass
class PipelineConfig:
    seed: int = 0
    downsample: int = 8
    sigma_precise: float = 15.0
    sigma_rough: float = 50.0
    adaptive_sigma: bool = False
    knn_k: int = 3
    knn_beta: float = 0.3
    transform: TransformParams = field(default_factory=TransformParams)
    rough_model: ModelConfig = field(default_factory=ModelConfig)
    precise_model: ModelConfig = field(default_factory=ModelConfig)
    rough_train: TrainConfig = field(default_factory=TrainConfig)
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        for name, mc in (("rough", self.rough_model), ("precise", self.precise_model)):
            if mc.downsample != self.downsample:
                raise ValueError(
                    f"{name} model downsamples by {mc.downsample} but targets use {self.downsample}"
                )


def build_targets(dataset, cfg):
    """Per-image (precise, rough) target maps on the 1/8 grid."""
    precise, rough = [], []
    for ann in dataset.annotations:
        if cfg.adaptive_sigma:
            sigmas = adaptive_sigmas(ann, k=cfg.knn_k, beta=cfg.knn_beta)
        else:
            sigmas = [cfg.sigma_precise] * ann.count()
        p = gaussian_density(ann, sigmas)
        r = gaussian_density(ann, [cfg.sigma_rough] * ann.count())
        precise.append(downsample_preserve_count(p, cfg.downsample))
        rough.append(downsample_preserve_count(r, cfg.downsample))
    return precise, rough


def dilation_maps(rough_net, images, params):
    """Rough-network inference mapped through the linear transformer."""
    preds = batch_infer(rough_net, images)
    ds = rough_net.config.downsample
    return [linear_transform(DensityMap(p, scale=1.0 / ds), params) for p in preds]


def _eval_counts(model, dataset, dmaps):
    preds = batch_infer(model, dataset.images, dmaps=dmaps)
    ds = model.config.downsample
    pred_maps = [DensityMap(p, scale=1.0 / ds) for p in preds]
    gts = [ann.count() for ann in dataset.annotations]
    return evaluate(pred_maps, gts)


def run_sds_pipeline(train_ds, test_ds, cfg):
    """Full three-step run: rough net, teacher, then distilled student.

    Returns (report, models). The report is a plain JSON-serializable dict;
    two runs with the same config and data produce identical reports.
    """
    precise_targets, rough_targets = build_targets(train_ds, cfg)

    rough = build_model(cfg.rough_model, seed=(cfg.seed, 0), role="rough")
    rough, rough_hist = train_stage(rough, train_ds.images, rough_targets, cfg.rough_train)

    train_dmaps = dilation_maps(rough, train_ds.images, cfg.transform)
    test_dmaps = dilation_maps(rough, test_ds.images, cfg.transform)

    teacher = build_model(cfg.precise_model, seed=(cfg.seed, 1), role="precise")
    teacher, teacher_hist = train_stage(
        teacher, train_ds.images, precise_targets, cfg.teacher_train, dmaps=train_dmaps
    )

    distilled = distill_targets(teacher, train_ds.images, train_dmaps, precise_targets)

    student = build_model(cfg.precise_model, seed=(cfg.seed, 2), role="precise")
    student.load_state(teacher.state())
    student, student_hist = train_stage(
        student, train_ds.images, distilled.maps, cfg.student_train, dmaps=train_dmaps
    )

    teacher_eval = _eval_counts(teacher, test_ds, test_dmaps)
    student_eval = _eval_counts(student, test_ds, test_dmaps)

    report = {
        "seed": cfg.seed,
        "config": config_echo(cfg),
        "stages": {
            "rough": {"loss_history": rough_hist},
            "teacher": {"loss_history": teacher_hist},
            "student": {"loss_history": student_hist},
        },
        "metrics": {
            "teacher": {"mae": teacher_eval.mae, "rmse": teacher_eval.rmse},
            "student": {"mae": student_eval.mae, "rmse": student_eval.rmse},
        },
        "distillation": {
            "teacher_id": distilled.teacher_id,
            "ratios": distilled.ratios,
            "fallbacks": distilled.fallbacks,
        },
    }
    models = {"rough": rough, "teacher": teacher, "student": student}
    return report, models


def config_echo(cfg):
    """PipelineConfig as nested plain dicts for report embedding."""

    def train_dict(tc):
        return {
            "epochs": tc.epochs,
            "batch_size": tc.batch_size,
            "lr": tc.lr,
            "weight_decay": tc.weight_decay,
            "seed": tc.seed,
            "flip": tc.flip,
            "random_crop": tc.random_crop,
            "crop_size": tc.crop_size,
        }

    def model_dict(mc):
        return {
            "stage_channels": list(mc.stage_channels),
            "pool_stages": mc.pool_stages,
            "trailing_channels": list(mc.trailing_channels),
            "refined_layers": mc.refined_layers,
        }

    return {
        "seed": cfg.seed,
        "downsample": cfg.downsample,
        "sigma_precise": cfg.sigma_precise,
        "sigma_rough": cfg.sigma_rough,
        "adaptive_sigma": cfg.adaptive_sigma,
        "knn_k": cfg.knn_k,
        "knn_beta": cfg.knn_beta,
        "transform": {"max_rate": cfg.transform.max_rate, "gamma": cfg.transform.gamma},
        "rough_model": model_dict(cfg.rough_model),
        "precise_model": model_dict(cfg.precise_model),
        "rough_train": train_dict(cfg.rough_train),
        "teacher_train": train_dict(cfg.teacher_train),
        "student_train": train_dict(cfg.student_train),
    }
