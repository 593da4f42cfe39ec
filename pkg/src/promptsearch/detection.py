"""Detection sub-network: simple feature pyramid, center-based head, RoIAlign.

The pyramid expands the 1/8-scale trunk feature map into 1/16, 1/8 and 1/4
scale maps via parallel strided conv / conv / transposed conv. A shared
head predicts per-cell objectness and normalized box offsets on each level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Linear
from .tensor import ShapeError, Tensor

SCORE_THRESHOLD = 0.5
NMS_IOU = 0.5
MAX_BOXES = 32
PYRAMID_CHANNELS = 64


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def area(self):
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a, b):
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, iou_threshold=NMS_IOU, max_keep=MAX_BOXES):
    """Greedy NMS; ties broken by score desc, then x1 asc, then y1 asc."""
    order = sorted(boxes, key=lambda b: (-b.score, b.x1, b.y1))
    keep = []
    for b in order:
        if all(iou(b, k) <= iou_threshold for k in keep):
            keep.append(b)
            if len(keep) >= max_keep:
                break
    return keep


class ConvLayer:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, scale=0.02):
        self.kernel = Tensor(rng.normal(0.0, scale, size=(k, k, cin, cout)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        return [self.kernel, self.bias]


class DeconvLayer:
    def __init__(self, rng, cin, cout, k=2, stride=2, scale=0.02):
        self.kernel = Tensor(rng.normal(0.0, scale, size=(k, k, cin, cout)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return T.deconv2d(x, self.kernel, self.bias, stride=self.stride)

    def params(self):
        return [self.kernel, self.bias]


class SimpleFeaturePyramid:
    """Trunk map at 1/8 scale -> maps at {1/16, 1/8, 1/4}, common width."""

    def __init__(self, in_channels, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
        c = PYRAMID_CHANNELS
        self.down = ConvLayer(rng, in_channels, c, k=2, stride=2)
        self.same = ConvLayer(rng, in_channels, c, k=3, stride=1, padding=1)
        self.up = DeconvLayer(rng, in_channels, c, k=3, stride=2)

    def __call__(self, trunk_out):
        return [self.down(trunk_out), self.same(trunk_out), self.up(trunk_out)]

    def params(self):
        return self.down.params() + self.same.params() + self.up.params()

    def named_params(self):
        return {
            "pyramid.down.kernel": self.down.kernel, "pyramid.down.bias": self.down.bias,
            "pyramid.same.kernel": self.same.kernel, "pyramid.same.bias": self.same.bias,
            "pyramid.up.kernel": self.up.kernel, "pyramid.up.bias": self.up.bias,
        }


class DetectionHead:
    """Shared per-level head: objectness logit + (tx, ty, tw, th) per cell."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
        c = PYRAMID_CHANNELS
        self.conv1 = ConvLayer(rng, c, 64, k=3, stride=1, padding=1)
        self.conv2 = ConvLayer(rng, 64, 64, k=3, stride=1, padding=1)
        self.out = ConvLayer(rng, 64, 5, k=1, stride=1)

    def __call__(self, level):
        return self.out(T.gelu(self.conv2(T.gelu(self.conv1(level)))))

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.out.params()

    def named_params(self):
        return {
            "head.conv1.kernel": self.conv1.kernel, "head.conv1.bias": self.conv1.bias,
            "head.conv2.kernel": self.conv2.kernel, "head.conv2.bias": self.conv2.bias,
            "head.out.kernel": self.out.kernel, "head.out.bias": self.out.bias,
        }


def level_strides(level_shapes, image_size):
    return [image_size / s[0] for s in level_shapes]


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _local_peaks(obj):
    """Cells that are >= all 8 neighbours (CenterNet-style peak picking)."""
    padded = np.pad(obj, 1, constant_values=-np.inf)
    peak = np.ones_like(obj, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            peak &= obj >= padded[1 + dr:1 + dr + obj.shape[0],
                                  1 + dc:1 + dc + obj.shape[1]]
    return peak


def decode_boxes(head_outputs, image_size):
    """Head outputs (numpy or Tensor) -> thresholded, NMS-filtered boxes.

    Only objectness cells that are local maxima of their 3x3 neighbourhood
    are decoded; cells inside an object are untrained for classification
    and would otherwise emit shifted duplicates.
    """
    cands = []
    for out in head_outputs:
        arr = out.data if isinstance(out, Tensor) else np.asarray(out)
        h, w, _ = arr.shape
        stride = image_size / h
        obj = _sigmoid(arr[:, :, 0])
        ys, xs = np.nonzero((obj > SCORE_THRESHOLD) & _local_peaks(obj))
        for r, c in zip(ys.tolist(), xs.tolist()):
            # box voting: average the regressions of confident neighbours,
            # which were trained to point at the same object
            acc = np.zeros(4)
            total = 0.0
            for rr in range(max(0, r - 1), min(h, r + 2)):
                for cc in range(max(0, c - 1), min(w, c + 2)):
                    weight = obj[rr, cc]
                    if weight <= 0.2 and (rr, cc) != (r, c):
                        continue
                    tx, ty, tw, th = arr[rr, cc, 1:]
                    cx = (cc + 0.5) * stride + tx * stride
                    cy = (rr + 0.5) * stride + ty * stride
                    bw = np.exp(np.clip(tw, -6, 6)) * stride
                    bh = np.exp(np.clip(th, -6, 6)) * stride
                    acc += weight * np.array([cx - bw / 2, cy - bh / 2,
                                              cx + bw / 2, cy + bh / 2])
                    total += weight
            x1, y1, x2, y2 = acc / total
            x1 = float(np.clip(x1, 0, image_size))
            y1 = float(np.clip(y1, 0, image_size))
            x2 = float(np.clip(x2, 0, image_size))
            y2 = float(np.clip(y2, 0, image_size))
            if x2 > x1 and y2 > y1:
                cands.append(Box(x1, y1, x2, y2, float(obj[r, c])))
    return nms(cands)


def assign_targets(gt_boxes, level_shapes, image_size):
    """Center-cell assignment on the finest pyramid level.

    All person glyphs are small relative to the image, so the finest level
    carries every positive; the coarser levels are trained all-negative.
    The center cell is the objectness positive; every cell whose center
    lies inside the box also receives regression targets so near-misses
    localize onto the object and collapse under NMS. When two boxes claim
    a cell the larger wins.
    Returns per level (objectness map, regression map, positive mask,
    regression mask).
    """
    strides = [image_size / s[0] for s in level_shapes]
    out = [(np.zeros((h, w)), np.zeros((h, w, 4)),
            np.zeros((h, w), dtype=bool), np.zeros((h, w), dtype=bool))
           for (h, w) in level_shapes]
    li = int(np.argmin(strides))
    h, w = level_shapes[li]
    stride = strides[li]
    obj, reg, pos, regmask = out[li]
    for box in sorted(gt_boxes, key=lambda b: b.area()):
        cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
        c = min(int(cx / stride), w - 1)
        r = min(int(cy / stride), h - 1)
        obj[r, c] = 1.0
        pos[r, c] = True
        r_lo = max(0, min(int(box.y1 / stride), r - 1))
        r_hi = min(h, max(int(np.ceil(box.y2 / stride)), r + 2))
        c_lo = max(0, min(int(box.x1 / stride), c - 1))
        c_hi = min(w, max(int(np.ceil(box.x2 / stride)), c + 2))
        for rr in range(r_lo, r_hi):
            for cc in range(c_lo, c_hi):
                ccy, ccx = (rr + 0.5) * stride, (cc + 0.5) * stride
                inside = box.x1 <= ccx <= box.x2 and box.y1 <= ccy <= box.y2
                if not (inside or (rr == r and cc == c)):
                    continue
                regmask[rr, cc] = True
                reg[rr, cc] = [
                    (cx - ccx) / stride,
                    (cy - ccy) / stride,
                    np.log(max(box.x2 - box.x1, 1e-6) / stride),
                    np.log(max(box.y2 - box.y1, 1e-6) / stride),
                ]
    return out


def detection_loss(head_outputs, gt_boxes, image_size):
    """Objectness BCE with hard negative mining + smooth-L1 box regression.

    Positives are averaged; negatives are the hardest 3x as many cells
    (by current BCE value, at least 8) averaged, so easy background does
    not dilute the near-object cells that cause false positives. With no
    ground truth the regression term is zero.
    """
    level_shapes = [o.shape[:2] for o in head_outputs]
    targets = assign_targets(gt_boxes, level_shapes, image_size)
    pos_cls, neg_terms, reg_terms = [], [], []
    neg_values = []
    n_pos = n_reg = 0
    for out, (obj, reg, pos, regmask) in zip(head_outputs, targets):
        bce = T.bce_with_logits(out[:, :, 0], obj)
        # Cells adjacent to a center share its appearance; they are ignored
        # for classification (their boxes collapse onto the center under NMS).
        neg_terms.append((bce, ~regmask))
        neg_values.append(bce.data[~regmask])
        if pos.any():
            pos_cls.append(T.sum_(T.mul(bce, pos.astype(float))))
            n_pos += int(pos.sum())
        if regmask.any():
            rows, cols = np.nonzero(regmask)
            offs = out[(rows, cols)][:, 1:5]
            reg_terms.append(T.sum_(T.smooth_l1(offs, reg[regmask])))
            n_reg += int(regmask.sum())
    k = max(8, 3 * n_pos)
    threshold = np.sort(np.concatenate(neg_values))[::-1][:k][-1]
    hard, n_hard = [], 0
    for bce, neg in neg_terms:
        mask = neg & (bce.data >= threshold)
        if mask.any():
            hard.append(T.sum_(T.mul(bce, mask.astype(float))))
            n_hard += int(mask.sum())
    loss = T.mul(_sum_terms(hard), 1.0 / n_hard)
    if pos_cls:
        loss = T.add(loss, T.mul(_sum_terms(pos_cls), 1.0 / n_pos))
    if reg_terms:
        loss = T.add(loss, T.mul(_sum_terms(reg_terms), 1.0 / n_reg))
    return loss


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


_ROI_WEIGHT_CACHE = {}


def roi_align(feature, box, scale, out_size=8):
    """Average of 2x2 bilinear samples per output cell, differentiable in F.

    `scale` maps image coordinates to feature coordinates (feature = image/scale).
    Degenerate boxes are clamped to a minimum 1-pixel image extent.
    """
    h, w, c = feature.shape
    x1, y1, x2, y2 = box.as_tuple()
    if x2 - x1 < 1.0:
        cx = (x1 + x2) / 2
        x1, x2 = cx - 0.5, cx + 0.5
    if y2 - y1 < 1.0:
        cy = (y1 + y2) / 2
        y1, y2 = cy - 0.5, cy + 0.5
    fx1, fy1, fx2, fy2 = x1 / scale, y1 / scale, x2 / scale, y2 / scale
    weights = _roi_weights(h, w, fx1, fy1, fx2, fy2, out_size)
    flat = T.reshape(feature, (h * w, c))
    return T.reshape(T.matmul(Tensor(weights), flat), (out_size, out_size, c))


def _roi_weights(h, w, fx1, fy1, fx2, fy2, out_size):
    key = (h, w, round(fx1, 9), round(fy1, 9), round(fx2, 9), round(fy2, 9), out_size)
    cached = _ROI_WEIGHT_CACHE.get(key)
    if cached is not None:
        return cached
    cell_h = (fy2 - fy1) / out_size
    cell_w = (fx2 - fx1) / out_size
    weights = np.zeros((out_size * out_size, h * w))
    for i in range(out_size):
        for j in range(out_size):
            row = i * out_size + j
            for sy in range(2):
                for sx in range(2):
                    py = fy1 + cell_h * (i + (sy + 0.5) / 2)
                    px = fx1 + cell_w * (j + (sx + 0.5) / 2)
                    _bilinear_into(weights[row], h, w, py, px, 0.25)
    if len(_ROI_WEIGHT_CACHE) > 4096:
        _ROI_WEIGHT_CACHE.clear()
    _ROI_WEIGHT_CACHE[key] = weights
    return weights


def _bilinear_into(row, h, w, py, px, coeff):
    """Accumulate bilinear interpolation weights at feature point (py, px).

    Feature cell (r, c) has its value at center (r + 0.5, c + 0.5); samples
    are clamped to the border.
    """
    y = min(max(py - 0.5, 0.0), h - 1.0)
    x = min(max(px - 0.5, 0.0), w - 1.0)
    r0, c0 = int(np.floor(y)), int(np.floor(x))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    dy, dx = y - r0, x - c0
    row[r0 * w + c0] += coeff * (1 - dy) * (1 - dx)
    row[r0 * w + c1] += coeff * (1 - dy) * dx
    row[r1 * w + c0] += coeff * dy * (1 - dx)
    row[r1 * w + c1] += coeff * dy * dx
