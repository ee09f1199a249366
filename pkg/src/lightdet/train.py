"""SGD training loop with warmup, plus the evaluation glue for trained models."""
from __future__ import annotations

import math

import numpy as np

from .boxes import Box
from .data import hflip
from .metrics import MetricReport, evaluate
from .model import DetectorModel, detect_images, training_loss
from .tensor import Tensor


class SGD:
    """Momentum SGD; weight decay touches only multi-axis tensors (never biases,
    norm affines, or other vectors), and the learning rate ramps linearly over
    the first `warmup` steps. With `total_steps` set, the post-warmup rate
    follows a half-cosine down to `final_frac` of the base rate. Gradients are
    rescaled to a global norm of at most `clip_norm` before the update; small
    batches drive the norm orders of magnitude past the useful step scale."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.937,
                 weight_decay: float = 5e-4, warmup: int = 20,
                 total_steps: int | None = None, final_frac: float = 0.1,
                 clip_norm: float | None = 10.0):
        self.params = [p for p in params if p.requires_grad]
        self.vel = [np.zeros_like(p.data) for p in self.params]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup = max(int(warmup), 0)
        self.total_steps = total_steps
        self.final_frac = final_frac
        self.clip_norm = clip_norm
        self.t = 0

    def lr_at(self, t: int) -> float:
        if self.warmup and t < self.warmup:
            return self.lr * (t + 1) / self.warmup
        if not self.total_steps or self.total_steps <= self.warmup:
            return self.lr
        span = self.total_steps - self.warmup
        prog = min(max((t - self.warmup) / span, 0.0), 1.0)
        lo = self.lr * self.final_frac
        return lo + (self.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * prog))

    def grad_norm(self) -> float:
        sq = sum(float((p.grad.astype(np.float64) ** 2).sum())
                 for p in self.params if p.grad is not None)
        return math.sqrt(sq)

    def step(self) -> None:
        lr = self.lr_at(self.t)
        self.t += 1
        scale = 1.0
        if self.clip_norm:
            total = self.grad_norm()
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for p, v in zip(self.params, self.vel):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            if self.weight_decay and p.data.ndim > 1:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)


def fit(model: DetectorModel, images: np.ndarray, targets: list[np.ndarray],
        iters: int, batch: int = 8, lr: float = 0.01, momentum: float = 0.937,
        weight_decay: float = 5e-4, warmup: int = 20, box_kind: str = "siou",
        seed: int = 0, augment: bool = False, cosine: bool = False,
        clip_norm: float | None = 10.0, on_epoch=None) -> list[dict]:
    """Runs `iters` optimizer steps over the set; returns the per-step loss parts.

    Batches cycle through a seeded shuffle, reshuffled each pass. `on_epoch`
    (if given) fires after every full pass with (epoch_index, mean_parts).
    """
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    b = min(batch, n)
    steps_per_epoch = max(1, math.ceil(n / b))
    opt = SGD(model.parameters(), lr=lr, momentum=momentum,
              weight_decay=weight_decay, warmup=warmup,
              total_steps=iters if cosine else None, clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cursor = 0
    model.train()
    trace: list[dict] = []
    epoch_rows: list[dict] = []
    epoch = 0
    for _ in range(iters):
        if cursor + b > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + b]
        cursor += b
        imgs = images[idx]
        tgts = [targets[i] for i in idx]
        if augment:
            flips = rng.random(b) < 0.5
            imgs = imgs.copy()
            tgts = list(tgts)
            for k in np.flatnonzero(flips):
                imgs[k], tgts[k] = hflip(imgs[k], tgts[k])
        preds = model(Tensor(imgs))
        total, parts = training_loss(preds, tgts, model.detect,
                                     model.img_size, box_kind)
        model.zero_grad()
        total.backward()
        opt.step()
        trace.append(parts)
        epoch_rows.append(parts)
        if len(trace) % steps_per_epoch == 0:
            if on_epoch is not None:
                mean_parts = {k: float(np.mean([r[k] for r in epoch_rows]))
                              for k in ("box", "obj", "cls", "total")}
                on_epoch(epoch, mean_parts)
                model.train()  # callback may have run an eval pass
            epoch_rows = []
            epoch += 1
    return trace


def targets_to_gt(targets: list[np.ndarray], img_size: int):
    """Normalized label rows -> per-image (class, Box-in-pixels) lists."""
    gts = []
    for t in targets:
        rows = np.asarray(t, dtype=np.float64).reshape(-1, 5)
        gts.append([(int(r[0]), Box(r[1] * img_size, r[2] * img_size,
                                    r[3] * img_size, r[4] * img_size))
                    for r in rows])
    return gts


def evaluate_model(model: DetectorModel, images: np.ndarray,
                   targets: list[np.ndarray], conf_thr: float = 0.001,
                   nms_iou: float = 0.45, match_iou: float = 0.5) -> MetricReport:
    """mAP@0.5 and P/R of the model on an in-memory split."""
    dets = detect_images(model, images, conf_thr=conf_thr, iou_thr=nms_iou)
    gts = targets_to_gt(targets, model.img_size)
    return evaluate(dets, gts, model.nc, iou_thr=match_iou)
