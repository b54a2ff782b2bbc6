"""Count-level evaluation: MAE and RMSE over a test set."""

import math
from dataclasses import dataclass


@dataclass
class EvalResult:
    mae: float
    rmse: float
    per_image: list  # (predicted count, ground-truth count) pairs


def evaluate(preds, gts):
    """MAE and RMSE of per-image counts.

    ``preds`` are density maps (predicted count = map sum), ``gts`` the
    annotated counts. RMSE >= MAE always holds, with equality only when
    all absolute errors are equal.
    """
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("cannot evaluate an empty prediction set")
    per_image = [(p.total(), float(g)) for p, g in zip(preds, gts)]
    errors = [abs(p - g) for p, g in per_image]
    n = len(errors)
    mae = sum(errors) / n
    rmse = math.sqrt(sum(e * e for e in errors) / n)
    return EvalResult(mae=mae, rmse=rmse, per_image=per_image)


def write_eval_csv(path, result, image_ids=None):
    """Per-image CSV: image_id, predicted, ground_truth, abs_error."""
    if image_ids is None:
        image_ids = [str(i) for i in range(len(result.per_image))]
    lines = ["image_id,predicted,ground_truth,abs_error"]
    for image_id, (p, g) in zip(image_ids, result.per_image):
        lines.append(f"{image_id},{p!r},{g!r},{abs(p - g)!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
