"""Detector assembly: graphs, anchored head, loss, NMS, checkpoints, cost tables.

Both variants share the same trunk and a 3-level anchored head at strides
8/16/32. The baseline keeps the classic cross-stage PAN neck; the light variant
swaps the deepest backbone stage for a channel-reduced window-attention block
and replaces the neck with the separable bidirectional fusion gated by GAM.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .bifpn import LightBiFpn
from .boxes import Box, box_loss, corners_np, iou_matrix
from .errors import CheckpointError
from .gam import GAM
from .metrics import Detection
from .nn import C3, Concat, ConvBnAct, Conv2d, Module, SPPF, Upsample2x, make_divisible
from .sepvit import SepViTBlock
from .tensor import Tensor, concat, no_grad

ANCHORS_BASE = np.array([
    [[10, 13], [16, 30], [33, 23]],
    [[30, 61], [62, 45], [59, 119]],
    [[116, 90], [156, 198], [373, 326]],
], dtype=np.float32)  # defined at a 640px reference input
STRIDES = (8, 16, 32)


class Detect(Module):
    """Per-level 1x1 convs producing 3 anchored predictions of (box, obj, classes)."""

    def __init__(self, nc: int, ch: tuple[int, int, int], img_size: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if nc < 1:
            raise ValueError("need at least one class")
        self.nc = nc
        self.no = nc + 5
        self.strides = STRIDES
        self.m = [Conv2d(c, 3 * self.no, 1, bias=True, rng=rng) for c in ch]
        self.register_buffer("anchors", Tensor(ANCHORS_BASE * (img_size / 640.0)))
        self._init_biases(img_size)

    def _init_biases(self, img_size: int) -> None:
        # objectness starts rare, classes near uniform-low: the usual priors
        for conv, s in zip(self.m, self.strides):
            b = conv.bias.data.reshape(3, self.no)
            b[:, 4] += math.log(8.0 / (img_size / s) ** 2)
            b[:, 5:] += math.log(0.6 / (self.nc - 0.99999))

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != 3:
            raise ValueError("head expects 3 pyramid levels")
        return [conv(f) for conv, f in zip(self.m, feats)]

    def flops_rows(self, hw3: tuple[int, int]):
        rows = []
        for i, conv in enumerate(self.m):
            hw = (hw3[0] >> i, hw3[1] >> i)
            rows.append((f"detect.m.{i}", conv.param_count(), conv.flops(hw)))
        return rows


@dataclass
class Row:
    name: str
    src: object  # -1 = previous row (or model input for row 0), int, or list[int]
    layer: Module
    c_out: int


class DetectorModel(Module):
    def __init__(self, rows: list[Row], nc: int, img_size: int, kind: str):
        super().__init__()
        self.layers = [r.layer for r in rows]  # walked for parameters
        self._rows = rows
        self.nc = nc
        self.img_size = img_size
        self.kind = kind

    @property
    def detect(self) -> Detect:
        return self._rows[-1].layer

    def forward(self, x: Tensor) -> list[Tensor]:
        outs: list = []
        for i, row in enumerate(self._rows):
            if row.src == -1:
                y = row.layer(x if i == 0 else outs[i - 1])
            elif isinstance(row.src, int):
                y = row.layer(outs[row.src])
            else:
                vals = [outs[s] for s in row.src]
                if len(vals) == 1 and isinstance(vals[0], tuple):
                    vals = list(vals[0])  # a multi-output row feeds this one whole
                y = row.layer(*vals) if isinstance(row.layer, LightBiFpn) else row.layer(vals)
            outs.append(y)
        return outs[-1]

    def cost_rows(self, img_size: int | None = None):
        """(name, params, flops) per row at batch 1; shapes propagated exactly."""
        size = img_size or self.img_size
        shapes: list = []
        rows_out: list[tuple[str, int, int]] = []
        for i, row in enumerate(self._rows):
            if row.src == -1:
                src_shape = (3, size, size) if i == 0 else shapes[i - 1]
            elif isinstance(row.src, int):
                src_shape = shapes[row.src]
            else:
                src_shape = [shapes[s] for s in row.src]
                if len(src_shape) == 1 and isinstance(src_shape[0][0], tuple):
                    src_shape = list(src_shape[0])
            layer = row.layer
            if isinstance(layer, LightBiFpn):
                hw3 = src_shape[0][1:]
                rows_out.extend(layer.cost_rows(hw3))
                out_shape = (
                    (layer.out3.cv3.conv.c2, hw3[0], hw3[1]),
                    (layer.out4.cv3.conv.c2, hw3[0] // 2, hw3[1] // 2),
                    (layer.out5.cv3.conv.c2, hw3[0] // 4, hw3[1] // 4),
                )
            elif isinstance(layer, Detect):
                rows_out.extend(layer.flops_rows(src_shape[0][1:]))
                out_shape = tuple(src_shape)
            elif isinstance(layer, Concat):
                out_shape = (sum(s[0] for s in src_shape),
                             src_shape[0][1], src_shape[0][2])
                rows_out.append((row.name, 0, 0))
            else:
                hw = src_shape[1:]
                oh, ow = layer.out_hw(hw)
                out_shape = (row.c_out, oh, ow)
                rows_out.append((row.name, layer.param_count(), layer.flops(hw)))
            shapes.append(out_shape)
        return rows_out

    def total_cost(self, img_size: int | None = None) -> tuple[int, int]:
        rows = self.cost_rows(img_size)
        return sum(r[1] for r in rows), sum(r[2] for r in rows)


def _depth(n: int, mult: float) -> int:
    return max(round(n * mult), 1)


def _widths(width: float) -> tuple[int, ...]:
    return tuple(make_divisible(c * width) for c in (64, 128, 256, 512, 1024))


def build_baseline(nc: int = 2, width: float = 0.25, depth: float = 0.33,
                   act: str = "mish", img_size: int = 640,
                   rng: np.random.Generator | None = None) -> DetectorModel:
    rng = rng or np.random.default_rng(0)
    c0, c1, c2, c3, c4 = _widths(width)
    d1, d2, d3 = _depth(3, depth), _depth(6, depth), _depth(9, depth)
    r: list[Row] = []

    def add(name, src, layer, c_out):
        r.append(Row(name, src, layer, c_out))
        return len(r) - 1

    add("stem", -1, ConvBnAct(3, c0, 6, 2, p=2, act=act, rng=rng), c0)
    add("down1", -1, ConvBnAct(c0, c1, 3, 2, act=act, rng=rng), c1)
    add("stage1", -1, C3(c1, c1, d1, act=act, rng=rng), c1)
    add("down2", -1, ConvBnAct(c1, c2, 3, 2, act=act, rng=rng), c2)
    p3 = add("stage2", -1, C3(c2, c2, d2, act=act, rng=rng), c2)
    add("down3", -1, ConvBnAct(c2, c3, 3, 2, act=act, rng=rng), c3)
    p4 = add("stage3", -1, C3(c3, c3, d3, act=act, rng=rng), c3)
    add("down4", -1, ConvBnAct(c3, c4, 3, 2, act=act, rng=rng), c4)
    add("stage4", -1, C3(c4, c4, d1, act=act, rng=rng), c4)
    spp = add("sppf", -1, SPPF(c4, c4, 5, act=act, rng=rng), c4)

    lat5 = add("lat5", spp, ConvBnAct(c4, c3, 1, act=act, rng=rng), c3)
    up1 = add("up1", -1, Upsample2x(), c3)
    add("cat_td4", [up1, p4], Concat(), c3 * 2)
    add("td4", -1, C3(c3 * 2, c3, d1, shortcut=False, act=act, rng=rng), c3)
    lat4 = add("lat4", -1, ConvBnAct(c3, c2, 1, act=act, rng=rng), c2)
    up2 = add("up2", -1, Upsample2x(), c2)
    add("cat_out3", [up2, p3], Concat(), c2 * 2)
    out3 = add("out3", -1, C3(c2 * 2, c2, d1, shortcut=False, act=act, rng=rng), c2)
    dn3 = add("pan_down3", -1, ConvBnAct(c2, c2, 3, 2, act=act, rng=rng), c2)
    add("cat_out4", [dn3, lat4], Concat(), c2 * 2)
    out4 = add("out4", -1, C3(c2 * 2, c3, d1, shortcut=False, act=act, rng=rng), c3)
    dn4 = add("pan_down4", -1, ConvBnAct(c3, c3, 3, 2, act=act, rng=rng), c3)
    add("cat_out5", [dn4, lat5], Concat(), c3 * 2)
    out5 = add("out5", -1, C3(c3 * 2, c4, d1, shortcut=False, act=act, rng=rng), c4)
    add("detect", [out3, out4, out5], Detect(nc, (c2, c3, c4), img_size, rng=rng), 0)
    return DetectorModel(r, nc, img_size, "baseline")


def build_light(nc: int = 2, width: float = 0.25, depth: float = 0.33,
                act: str = "mish", img_size: int = 640,
                rng: np.random.Generator | None = None) -> DetectorModel:
    rng = rng or np.random.default_rng(0)
    c0, c1, c2, c3, c4 = _widths(width)
    d1, d2, d3 = _depth(3, depth), _depth(6, depth), _depth(9, depth)
    r: list[Row] = []

    def add(name, src, layer, c_out):
        r.append(Row(name, src, layer, c_out))
        return len(r) - 1

    add("stem", -1, ConvBnAct(3, c0, 6, 2, p=2, act=act, rng=rng), c0)
    add("down1", -1, ConvBnAct(c0, c1, 3, 2, act=act, rng=rng), c1)
    add("stage1", -1, C3(c1, c1, d1, act=act, rng=rng), c1)
    add("down2", -1, ConvBnAct(c1, c2, 3, 2, act=act, rng=rng), c2)
    p3 = add("stage2", -1, C3(c2, c2, d2, act=act, rng=rng), c2)
    add("down3", -1, ConvBnAct(c2, c3, 3, 2, act=act, rng=rng), c3)
    p4 = add("stage3", -1, C3(c3, c3, d3, act=act, rng=rng), c3)
    add("down4", -1, ConvBnAct(c3, c4, 3, 2, act=act, rng=rng), c4)
    # deepest stage: channel-reduced global attention instead of a conv block
    add("attn_reduce", -1, ConvBnAct(c4, c3, 1, act=act, rng=rng), c3)
    add("attn", -1, SepViTBlock(c3, rng=rng), c3)
    add("attn_expand", -1, ConvBnAct(c3, c4, 1, act=act, rng=rng), c4)
    spp = add("sppf", -1, SPPF(c4, c4, 5, act=act, rng=rng), c4)

    neck = LightBiFpn(
        c3=c2, c4=c3, c5=c4, mid=c1, out3=c2, out4=c3, out5=c4, act=act,
        attn_td=GAM(c1 // 2, hidden=min(4, c1 // 2), rng=rng),
        attn_out4=GAM(c3 // 2, hidden=min(4, c3 // 2), rng=rng),
        rng=rng,
    )
    nk = add("neck", [p3, p4, spp], neck, 0)
    add("detect", [nk], Detect(nc, (c2, c3, c4), img_size, rng=rng), 0)
    return DetectorModel(r, nc, img_size, "light")


def build_model(kind: str, **kw) -> DetectorModel:
    if kind == "baseline":
        return build_baseline(**kw)
    if kind == "light":
        return build_light(**kw)
    raise ValueError(f"unknown model kind {kind!r}")


# ---- target assignment and loss ----


def assign_targets(targets: list[np.ndarray], detect: Detect, img_size: int,
                   grids: list[tuple[int, int]], ratio_thr: float = 4.0):
    """Anchor/cell assignment per level.

    targets: per image, (n, 5) rows of (class, cx, cy, w, h) normalized to [0,1].
    A box lands in its center cell plus the two nearest neighbor cells, on every
    anchor whose w/h ratio to the box is within ratio_thr in both directions.
    Returns per level: (b, a, gj, gi, tbox, cls) with tbox in grid units and its
    xy relative to the assigned cell origin.
    """
    out = []
    anchors_px = detect.anchors.numpy()
    for lvl, (gh, gw) in enumerate(grids):
        stride = img_size / gh
        anchors = anchors_px[lvl] / stride  # grid units
        bs, as_, gjs, gis, tb, tc = [], [], [], [], [], []
        for b, t in enumerate(targets):
            for cls, cx, cy, w, h in np.asarray(t, dtype=np.float64).reshape(-1, 5):
                gx, gy = cx * gw, cy * gh
                tw, th = w * gw, h * gh
                if tw <= 0 or th <= 0:
                    continue
                ratio = np.stack([tw / anchors[:, 0], th / anchors[:, 1]], axis=1)
                keep = np.maximum(ratio, 1.0 / ratio).max(axis=1) < ratio_thr
                if not keep.any():
                    continue
                gi0 = min(int(gx), gw - 1)
                gj0 = min(int(gy), gh - 1)
                cells = [(gi0, gj0)]
                dx = -1 if (gx - gi0) < 0.5 else 1
                dy = -1 if (gy - gj0) < 0.5 else 1
                for ci, cj in ((gi0 + dx, gj0), (gi0, gj0 + dy)):
                    if 0 <= ci < gw and 0 <= cj < gh:
                        cells.append((ci, cj))
                for a in np.flatnonzero(keep):
                    for ci, cj in cells:
                        bs.append(b)
                        as_.append(int(a))
                        gjs.append(cj)
                        gis.append(ci)
                        tb.append((gx - ci, gy - cj, tw, th))
                        tc.append(int(cls))
        out.append((
            np.asarray(bs, np.int64), np.asarray(as_, np.int64),
            np.asarray(gjs, np.int64), np.asarray(gis, np.int64),
            np.asarray(tb, np.float64).reshape(-1, 4), np.asarray(tc, np.int64),
        ))
    return out


OBJ_BALANCE = (4.0, 1.0, 0.4)
LOSS_GAINS = {"box": 0.05, "obj": 1.0, "cls": 0.5}


def _bce_sum(logits: Tensor, target) -> Tensor:
    # sum over all entries of softplus(x) - x*t, the logit-space BCE
    return (logits.softplus() - logits * target).sum()


def _pair_iou_np(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Row-wise IoU of center-form box arrays; plain numpy, no gradient."""
    pa = corners_np(pred.astype(np.float64))
    ga = corners_np(gt.astype(np.float64))
    lt = np.maximum(pa[:, :2], ga[:, :2])
    rb = np.minimum(pa[:, 2:], ga[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    return inter / np.maximum(union, 1e-9)


def training_loss(preds: list[Tensor], targets: list[np.ndarray], detect: Detect,
                  img_size: int, box_kind: str = "siou",
                  gains: dict | None = None, obj_target: str = "iou"):
    """Scalar loss Tensor plus float components.

    Objectness is logit-space BCE against a dense target field: zero at
    unassigned (anchor, cell) slots and, at assigned slots, either the
    overlap of the currently predicted box with its target (`obj_target=
    "iou"`, held constant w.r.t. the parameters) or plain 1 (`"one"`).
    Grading assigned slots by achieved overlap lets the confidence head
    rank good boxes above poor ones at inference; the value is detached so
    the optimizer cannot shrink boxes to make the term cheaper. A slot
    assigned more than once keeps the largest target. Class probabilities
    use logit-space BCE per match, box the requested overlap loss.
    """
    gains = gains or LOSS_GAINS
    nc, no = detect.nc, detect.no
    grids = [(p.shape[2], p.shape[3]) for p in preds]
    assigned = assign_targets(targets, detect, img_size, grids)
    zero = Tensor(np.zeros((), preds[0].dtype))
    lbox, lobj, lcls = zero, zero, zero
    n_matched = 0
    for lvl, (p, (b, a, gj, gi, tbox, tcls)) in enumerate(zip(preds, assigned)):
        n, _, gh, gw = p.shape
        stride = img_size / gh
        anchors_grid = detect.anchors.numpy()[lvl].astype(np.float64) / stride
        pr = p.reshape(n, 3, no, gh, gw).transpose(0, 1, 3, 4, 2)  # N,3,H,W,no
        pobj = pr[..., 4]
        obj_sum = pobj.softplus().sum()
        if b.size:
            n_matched += b.size
            pm = pr[b, a, gj, gi]  # (M, no); duplicates accumulate in backward
            pxy = pm[:, 0:2].sigmoid() * 2.0 - 0.5
            pwh = (pm[:, 2:4].sigmoid() * 2.0) ** 2 * Tensor(anchors_grid[a])
            pbox = concat([pxy, pwh], axis=1)
            tb = Tensor(tbox)
            lbox = lbox + box_loss(box_kind, pbox, tb).mean()
            # deduplicate assigned slots before charging the obj term: BCE
            # against a dense field gives each slot one term no matter how
            # many boxes landed on it. Charging per match instead would
            # allow softplus(x) - 2x, which is unbounded below and gets
            # exploited immediately.
            if obj_target == "iou":
                tvals_all = _pair_iou_np(pbox.numpy(), tbox)
            elif obj_target == "one":
                tvals_all = np.ones(b.size)
            else:
                raise ValueError(f"unknown obj_target {obj_target!r}")
            lin = ((b * 3 + a) * gh + gj) * gw + gi
            uniq, inv = np.unique(lin, return_inverse=True)
            tvals = np.zeros(uniq.size)
            np.maximum.at(tvals, inv, np.clip(tvals_all, 0.0, 1.0))
            obj_sum = obj_sum - (pobj.reshape(-1)[uniq] * Tensor(tvals)).sum()
            onehot = np.zeros((b.size, nc), np.float64)
            onehot[np.arange(b.size), tcls] = 1.0
            lcls = lcls + _bce_sum(pm[:, 5:], Tensor(onehot)) * (1.0 / (b.size * nc))
        lobj = lobj + obj_sum * (OBJ_BALANCE[lvl] / pobj.size)
    total = lbox * gains["box"] + lobj * gains["obj"] + lcls * gains["cls"]
    parts = {
        "box": float(lbox.numpy()) * gains["box"],
        "obj": float(lobj.numpy()) * gains["obj"],
        "cls": float(lcls.numpy()) * gains["cls"],
        "total": float(total.numpy()),
        "matched": n_matched,
    }
    return total, parts


# ---- inference ----


def decode_predictions(preds_np: list[np.ndarray], anchors_px: np.ndarray,
                       img_size: int, nc: int) -> np.ndarray:
    """Raw level maps -> (N, total_anchors, 5+nc) rows of (cx, cy, w, h, obj, cls...).

    Box coordinates come out in input pixels, objectness and class scores as
    independent sigmoids.
    """
    out = []
    no = nc + 5
    for lvl, p in enumerate(preds_np):
        n, _, gh, gw = p.shape
        stride = img_size / gh
        pr = p.reshape(n, 3, no, gh, gw).transpose(0, 1, 3, 4, 2)
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-pr.astype(np.float64)))
        gy, gx = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        xy = (sig[..., 0:2] * 2.0 - 0.5 + np.stack([gx, gy], axis=-1)) * stride
        wh = (sig[..., 2:4] * 2.0) ** 2 * anchors_px[lvl][:, None, None, :]
        out.append(np.concatenate([xy, wh, sig[..., 4:]], axis=-1).reshape(n, -1, no))
    return np.concatenate(out, axis=1)


def nms_indices(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_thr: float = 0.45,
                max_det: int = 300) -> np.ndarray:
    """Greedy suppression; ties in score keep the lower index first."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while order.size and len(keep) < max_det:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        if not rest.size:
            break
        ious = iou_matrix(boxes_xyxy[i:i + 1], boxes_xyxy[rest])[0]
        order = rest[ious <= iou_thr]
    return np.asarray(keep, dtype=np.int64)


def detect_images(model: DetectorModel, images: np.ndarray, conf_thr: float = 0.25,
                  iou_thr: float = 0.45, max_det: int = 300) -> list[list[Detection]]:
    """Full inference: forward, decode, class-wise NMS; boxes in input pixels."""
    model.eval()
    with no_grad():
        raw = model(Tensor(images.astype(np.float32)))
    dec = decode_predictions([p.numpy() for p in raw], model.detect.anchors.numpy(),
                             model.img_size, model.nc)
    results: list[list[Detection]] = []
    for row in dec:
        cls_scores = row[:, 5:] * row[:, 4:5]
        cls_ids = cls_scores.argmax(axis=1)
        confs = cls_scores[np.arange(len(row)), cls_ids]
        m = confs >= conf_thr
        if not m.any():
            results.append([])
            continue
        boxes = np.clip(corners_np(row[m, :4]), 0.0, float(model.img_size))
        confs_m, cls_m = confs[m], cls_ids[m]
        # class-offset trick: boxes of different classes never suppress each other
        shift = cls_m[:, None] * (model.img_size * 2.0)
        keep = nms_indices(boxes + shift, confs_m, iou_thr, max_det)
        dets = [Detection(Box.from_corners(*boxes[i]), int(cls_m[i]), float(confs_m[i]))
                for i in keep]
        results.append(dets)
    return results


# ---- checkpoints ----

MAGIC = b"LYV5"
CKPT_VERSION = 1


def save_checkpoint(path: str, model: Module) -> None:
    items = list(model.named_state())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(items)))
        for name, t in items:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.numpy(), dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str, model: Module) -> None:
    """Restores tensors by name; any mismatch against the model is an error."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        loaded: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            dtype_code, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
            if dtype_code != 0:
                raise CheckpointError(f"{name}: unsupported dtype code {dtype_code}")
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "shape"))
            n_items = int(np.prod(shape)) if rank else 1
            payload = _read_exact(fh, 4 * n_items, f"data of {name}")
            loaded[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last tensor")

    state = dict(model.named_state())
    missing = sorted(set(state) - set(loaded))
    unknown = sorted(set(loaded) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:4])}")
    if unknown:
        raise CheckpointError(f"checkpoint has unknown tensors: {', '.join(unknown[:4])}")
    for name, t in state.items():
        src = loaded[name]
        if tuple(src.shape) != tuple(t.shape):
            raise CheckpointError(
                f"{name}: shape {tuple(src.shape)} in checkpoint, model needs "
                f"{tuple(t.shape)} (class count or width mismatch?)")
    for name, t in state.items():
        t.data = loaded[name].astype(np.float32)
