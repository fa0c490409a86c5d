"""Bounding-box geometry in normalized cx/cy/w/h coordinates.

Plain-numpy scalar and pairwise routines serve matching costs, graph
assembly and evaluation; the tensor route serves the box losses where
gradients must flow to the box heads.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor2

_EPS = 1e-9


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    single = boxes.ndim == 1
    b = boxes.reshape(-1, 4)
    half = b[:, 2:] / 2.0
    out = np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)
    return out[0] if single else out


def union_box(b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Smallest cx/cy/w/h box covering both inputs."""
    x1 = cxcywh_to_xyxy(b1)
    x2 = cxcywh_to_xyxy(b2)
    lo = np.minimum(x1[:2], x2[:2])
    hi = np.maximum(x1[2:], x2[2:])
    return np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2,
                     hi[0] - lo[0], hi[1] - lo[1]], dtype=np.float64)


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two (n, 4) xyxy arrays; zero-area boxes give 0."""
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a + area_b - inter
    return np.where(union > _EPS, inter / np.maximum(union, _EPS), 0.0)


def iou(b1, b2) -> float:
    a = cxcywh_to_xyxy(np.asarray(b1)).reshape(1, 4)
    b = cxcywh_to_xyxy(np.asarray(b2)).reshape(1, 4)
    return float(iou_xyxy(a, b)[0])


def giou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU of two (n, 4) xyxy arrays, in [-1, 1]."""
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a + area_b - inter
    iou_v = np.where(union > _EPS, inter / np.maximum(union, _EPS), 0.0)
    elt = np.minimum(a[:, :2], b[:, :2])
    erb = np.maximum(a[:, 2:], b[:, 2:])
    ewh = np.clip(erb - elt, 0.0, None)
    enclose = ewh[:, 0] * ewh[:, 1]
    return np.where(enclose > _EPS, iou_v - (enclose - union) / np.maximum(enclose, _EPS), iou_v)


def giou(b1, b2) -> float:
    """Generalized IoU of two cx/cy/w/h boxes."""
    a = cxcywh_to_xyxy(np.asarray(b1)).reshape(1, 4)
    b = cxcywh_to_xyxy(np.asarray(b2)).reshape(1, 4)
    return float(giou_xyxy(a, b)[0])


def pairwise_giou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(n, m) GIoU matrix between two cx/cy/w/h box sets."""
    a = cxcywh_to_xyxy(np.asarray(boxes_a))
    b = cxcywh_to_xyxy(np.asarray(boxes_b))
    n, m = a.shape[0], b.shape[0]
    ae = np.repeat(a, m, axis=0)
    be = np.tile(b, (n, 1))
    return giou_xyxy(ae, be).reshape(n, m)


def pairwise_l1(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)


# -- differentiable route for box losses -----------------------------------

def _split(t: Tensor2):
    return (ad.slice_cols(t, 0, 1), ad.slice_cols(t, 1, 2),
            ad.slice_cols(t, 2, 3), ad.slice_cols(t, 3, 4))


def giou_tensor(pred: Tensor2, target: Tensor2) -> Tensor2:
    """Row-wise GIoU between predicted boxes and constant targets, (n, 1).

    Assumes positive widths/heights (sigmoid box heads and valid ground
    truth), so no degenerate-area guards are needed on this path.
    """
    cx_p, cy_p, w_p, h_p = _split(pred)
    cx_t, cy_t, w_t, h_t = _split(target)
    half = 0.5
    ax0, ax1 = cx_p - w_p * half, cx_p + w_p * half
    ay0, ay1 = cy_p - h_p * half, cy_p + h_p * half
    bx0, bx1 = cx_t - w_t * half, cx_t + w_t * half
    by0, by1 = cy_t - h_t * half, cy_t + h_t * half
    zero = ad.constant(np.zeros((pred.rows, 1), dtype=pred.dtype))
    iw = ad.maximum(ad.minimum(ax1, bx1) - ad.maximum(ax0, bx0), zero)
    ih = ad.maximum(ad.minimum(ay1, by1) - ad.maximum(ay0, by0), zero)
    inter = iw * ih
    area_a = w_p * h_p
    area_b = w_t * h_t
    union = area_a + area_b - inter
    iou_v = inter / union
    ew = ad.maximum(ax1, bx1) - ad.minimum(ax0, bx0)
    eh = ad.maximum(ay1, by1) - ad.minimum(ay0, by0)
    enclose = ew * eh
    return iou_v - (enclose - union) / enclose


def l1_tensor(pred: Tensor2, target: Tensor2) -> Tensor2:
    """Row-wise L1 distance over the 4 coordinates, (n, 1)."""
    return ad.row_sum(ad.absval(pred - target))
