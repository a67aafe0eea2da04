"""Per-lighting-condition sensitivity of the loss to the input pixels."""

from __future__ import annotations

import csv
import io
import json
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import ImageStack
from .trainer import preprocess, resize_mask_nearest
from .unet import CHANNELS_PER_IMAGE, UNetModel, forward

N_IMAGES = 32


class DegenerateGradient(ValueError):
    pass


def input_gradients(model: UNetModel, x: np.ndarray, target: np.ndarray, loss_scale: float = 1.0) -> np.ndarray:
    """d BCE(forward(x), target) / dx for a single preprocessed input [C, H, W]."""
    if model.config.mode != "spat32":
        raise ValueError("sensitivity scores need a 32-image model")
    xt = T.Tensor(np.asarray(x)[None], requires_grad=True)
    loss = T.bce_loss(forward(model, xt), np.asarray(target, dtype=x.dtype).reshape(1, 1, *x.shape[1:]))
    if loss_scale != 1.0:
        loss = T.scale(loss, loss_scale)
    loss.backward()
    model.zero_grad()
    return xt.grad[0]


def stack_gradients(model: UNetModel, stack: ImageStack, gt_mask: np.ndarray | None) -> np.ndarray:
    """Input gradient for a stack; with no ground truth the model's own
    thresholded prediction is used as the target (flagged fallback)."""
    cfg = model.config
    x, _ = preprocess(stack, "spat32", (cfg.height, cfg.width))
    if gt_mask is None:
        with T.no_grad():
            target = (forward(model, T.Tensor(x[None])).data[0, 0] >= 0.5)
    else:
        target = resize_mask_nearest(np.asarray(gt_mask, dtype=bool), (cfg.height, cfg.width))
    return input_gradients(model, x, target.astype(np.float32))


def image_scores(grad: np.ndarray) -> np.ndarray:
    """Sum of squared gradients per image (3 channels each), normalised to sum 1."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape[0] != N_IMAGES * CHANNELS_PER_IMAGE:
        raise ValueError(f"expected {N_IMAGES * CHANNELS_PER_IMAGE} channels, got {g.shape[0]}")
    raw = (g.reshape(N_IMAGES, -1) ** 2).sum(axis=1)
    total = raw.sum()
    if not total > 0:
        raise DegenerateGradient("all input gradients are zero; scores are undefined")
    return raw / total


def aggregate(scores: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Per-image (min, q25, median, q75, max) with linear interpolation between order statistics."""
    s = np.asarray(list(scores), dtype=np.float64)
    if s.size == 0:
        raise ValueError("no cases to aggregate")
    q = np.quantile(s, [0.0, 0.25, 0.5, 0.75, 1.0], axis=0, method="linear")
    return dict(zip(("min", "q25", "median", "q75", "max"), q))


def scores_csv(case_ids: Sequence[str], scores: Sequence[np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id"] + [f"img_{k:02d}" for k in range(1, N_IMAGES + 1)])
    for cid, s in zip(case_ids, scores):
        w.writerow([cid] + [repr(float(v)) for v in s])
    return buf.getvalue()


def aggregate_json(agg: dict[str, np.ndarray]) -> str:
    doc = {"quantile_rule": "linear interpolation between order statistics",
           "images": [{"image": k + 1, **{name: float(v[k]) for name, v in agg.items()}}
                      for k in range(N_IMAGES)]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
