"""Two-step pipeline glue: probability map -> detections -> per-case scores."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import Case, rasterize_polygon
from .detector import DetectConfig, Detection, PrickLayout, detect
from .metrics import CaseResult, EvalConfig, EvalReport, build_report, clinical_filter, confusion, iou
from .synth import mm_to_px
from .trainer import predict
from .unet import UNetModel

GT_COLOUR = (0, 200, 0)
DET_COLOUR = (0, 255, 255)
PRICK_COLOUR = (255, 0, 0)


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def detect_case(prob: np.ndarray, case: Case, config: DetectConfig = DetectConfig()) -> Detection:
    layout = PrickLayout(case.annotations.prick_layout_mm)
    return detect(prob, case.stack.mm_per_pixel, layout, config)


def score_case(prob: np.ndarray, case: Case, det: Detection, eval_config: EvalConfig) -> CaseResult:
    dims = case.stack.dims
    s = case.stack.mm_per_pixel
    pred = prob >= eval_config.binarize_threshold
    tp, fp, fn = confusion(pred, case.gt_mask())
    pricks = sorted(case.annotations.polygons)
    gt_masks = [rasterize_polygon(case.annotations.polygons[k], dims) for k in pricks]
    areas_px = [int(m.sum()) for m in gt_masks]
    keep = clinical_filter(areas_px, s, eval_config.area_threshold_mm2)
    ious = []
    for i in keep:
        found = det.wheal_mask(pricks[i])
        # a prick without a matched detection scores IoU 0
        ious.append(0.0 if found is None else iou(found, gt_masks[i]))
    return CaseResult(case.case_id, tp, fp, fn, ious, [pricks[i] for i in keep],
                      [areas_px[i] * s * s for i in range(len(pricks))])


def evaluate_maps(probs: Sequence[np.ndarray], cases: Sequence[Case], mode: str,
                  eval_config: EvalConfig = EvalConfig(), detect_config: DetectConfig = DetectConfig(),
                  threads: int = 1) -> tuple[EvalReport, list[Detection]]:
    def one(i):
        det = detect_case(probs[i], cases[i], detect_config)
        return score_case(probs[i], cases[i], det, eval_config), det

    out = _map(one, range(len(cases)), threads)
    return build_report(mode, [r for r, _ in out], eval_config), [d for _, d in out]


def predict_all(model: UNetModel, cases: Sequence[Case], threads: int = 1) -> list[np.ndarray]:
    return _map(lambda c: predict(model, c.stack), cases, threads)


def evaluate_model(model: UNetModel, cases: Sequence[Case], eval_config: EvalConfig = EvalConfig(),
                   detect_config: DetectConfig = DetectConfig(), threads: int = 1
                   ) -> tuple[EvalReport, list[np.ndarray], list[Detection]]:
    probs = predict_all(model, cases, threads)
    report, dets = evaluate_maps(probs, cases, model.config.mode, eval_config, detect_config, threads)
    return report, probs, dets


def render_overlay(case: Case, det: Detection, upscale: int = 2) -> Image.Image:
    """Full-light image with ground truth (green), detections (cyan), pricks (red)."""
    base = case.stack.full_light if case.stack.full_light is not None else case.stack.directional[1]
    h, w = base.shape[:2]
    img = Image.fromarray(base).resize((w * upscale, h * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for poly in case.annotations.polygons.values():
        draw.polygon([tuple(p) for p in (poly * upscale).tolist()], outline=GT_COLOUR)
    for k in range(12):
        reg = det.match.matched_region(k)
        if reg is not None:
            draw.polygon([tuple(p) for p in (reg.contour() * upscale).tolist()], outline=DET_COLOUR)
    layout = PrickLayout(case.annotations.prick_layout_mm)
    pts = mm_to_px(det.match.transform.apply(layout.points_mm), det.dims, det.mm_per_pixel) * upscale
    for x, y in pts.tolist():
        draw.ellipse((x - 2, y - 2, x + 2, y + 2), fill=PRICK_COLOUR)
    return img
