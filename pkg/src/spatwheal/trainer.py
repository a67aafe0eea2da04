"""Preprocessing, training loop and inference for the pixel classifier."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import Case, DataError, ImageStack
from .metrics import dice
from .unet import MODES, ConfigError, UNetConfig, UNetModel, build, forward, stack_to_array

log = logging.getLogger(__name__)

FULL_SCALE = (768, 512)
DESK_SCALE = (192, 128)


@dataclass
class TrainConfig:
    epochs: int = 64
    batch_size: int = 4
    lr: float = 3e-4
    height: int = DESK_SCALE[0]
    width: int = DESK_SCALE[1]
    mode: str = "spat32"
    seed: int = 0
    split_ratio: float = 0.75
    hidden_features: int = 64
    depth: int = 3
    num_groups: int = 8
    # Adam hyperparameters are not published; library defaults assumed
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ConfigError("split_ratio must lie in (0, 1]")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        self.unet_config()

    def unet_config(self) -> UNetConfig:
        return UNetConfig.for_mode(self.mode, hidden_features=self.hidden_features, depth=self.depth,
                                   num_groups=self.num_groups, height=self.height, width=self.width)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[float | None] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def records(self) -> list[dict[str, Any]]:
        return [{"epoch": i + 1, "loss": l, "val_dice": d, "seconds": s}
                for i, (l, d, s) in enumerate(zip(self.train_loss, self.val_dice, self.seconds))]


@dataclass(frozen=True)
class ScaleRecord:
    source_dims: tuple[int, int]
    target_dims: tuple[int, int]
    mm_per_pixel_source: float

    @property
    def mm_per_pixel(self) -> tuple[float, float]:
        """Effective (row, col) mm per pixel after resizing."""
        (sh, sw), (th, tw) = self.source_dims, self.target_dims
        s = self.mm_per_pixel_source
        return (s * sh / th, s * sw / tw)


def preprocess(stack: ImageStack, mode: str, target: tuple[int, int]) -> tuple[np.ndarray, ScaleRecord]:
    """Return float32 [C, H, W] in [0, 1] at ``target`` plus the scale record."""
    stack.check()
    raw = stack_to_array(stack, mode).astype(np.float32) / 255.0
    arr = T.resize_array(raw, *target).astype(np.float32, copy=False)
    return arr, ScaleRecord(stack.dims, tuple(target), stack.mm_per_pixel)


def resize_mask_nearest(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    th, tw = target
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return mask[np.ix_(rows, cols)]


def stratified_split(cases: Sequence[Case], ratio: float, seed: int) -> tuple[list[Case], list[Case]]:
    """Per-site shuffled split; each site contributes round(ratio * n_site) training cases."""
    rng = np.random.default_rng(seed)
    by_site: dict[str, list[Case]] = {}
    for c in cases:
        by_site.setdefault(c.stack.site, []).append(c)
    train, val = [], []
    for site in sorted(by_site):
        group = sorted(by_site[site], key=lambda c: c.case_id)
        order = rng.permutation(len(group))
        n_train = int(round(ratio * len(group)))
        train += [group[i] for i in order[:n_train]]
        val += [group[i] for i in order[n_train:]]
    return sorted(train, key=lambda c: c.case_id), sorted(val, key=lambda c: c.case_id)


def _prepare(cases: Sequence[Case], cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    target = (cfg.height, cfg.width)
    xs = np.empty((len(cases), cfg.unet_config().in_channels, *target), dtype=np.float32)
    ys = np.empty((len(cases), 1, *target), dtype=np.float32)
    for i, c in enumerate(cases):
        xs[i], _ = preprocess(c.stack, cfg.mode, target)
        ys[i, 0] = resize_mask_nearest(c.gt_mask(), target)
    return xs, ys


def _predict_batches(model: UNetModel, xs: np.ndarray, batch_size: int) -> np.ndarray:
    out = np.empty((xs.shape[0], 1, *xs.shape[2:]), dtype=np.float32)
    with T.no_grad():
        for i in range(0, len(xs), batch_size):
            out[i:i + batch_size] = forward(model, T.Tensor(xs[i:i + batch_size])).data
    return out


def train(cases: Sequence[Case], config: TrainConfig, val_cases: Sequence[Case] = (),
          on_epoch: Callable[[dict[str, Any]], None] | None = None) -> tuple[UNetModel, TrainHistory]:
    """Train a fresh model on ``cases``; returns the final-epoch model.

    Deterministic for a fixed config (seed drives init and shuffling).  The
    last partial batch is kept.
    """
    if not cases:
        raise DataError("training set is empty")
    ucfg = config.unet_config()
    model = build(ucfg, config.seed)
    xs, ys = _prepare(cases, config)
    val = _prepare(val_cases, config) if val_cases else None
    params = model.parameters()
    state = T.AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                   beta2=config.beta2, eps=config.adam_eps)
    rng = np.random.default_rng(config.seed + 1)
    hist = TrainHistory()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(xs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            model.zero_grad()
            loss = T.bce_loss(forward(model, T.Tensor(xs[idx])), ys[idx])
            loss.backward()
            T.adam_step(params, [p.grad for p in params], state)
            total += loss.item() * len(idx)
            count += len(idx)
        mean_loss = total / count
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"non-finite training loss in epoch {epoch + 1}")
        vd = None
        if val is not None:
            pred = _predict_batches(model, val[0], config.batch_size) >= 0.5
            vd = dice(pred, val[1] > 0.5)
        hist.train_loss.append(mean_loss)
        hist.val_dice.append(vd)
        hist.seconds.append(time.perf_counter() - t0)
        rec = hist.records()[-1]
        log.info("epoch %d loss %.5f val_dice %s (%.1fs)", rec["epoch"], mean_loss,
                 "n/a" if vd is None else f"{vd:.4f}", rec["seconds"])
        if on_epoch is not None:
            on_epoch(rec)
    model.zero_grad()
    return model, hist


def predict(model: UNetModel, stack: ImageStack) -> np.ndarray:
    """Probability map (H, W) at the stack's original resolution."""
    cfg = model.config
    x, _ = preprocess(stack, cfg.mode, (cfg.height, cfg.width))
    with T.no_grad():
        prob = forward(model, T.Tensor(x[None])).data[0, 0]
    h, w = stack.dims
    return T.resize_array(prob, h, w).astype(np.float32, copy=False)


def history_jsonl(hist: TrainHistory) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in hist.records())
