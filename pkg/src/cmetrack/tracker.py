"""Per-frame tracking loop over a synthetic sequence.

Frame 0 initialises the memory from a box-shaped pseudo mask inside the query
region around the ground-truth box. Every later frame crops a query region
around the previous box, matches it against the memory, optionally fuses a
DFL readout, binarises, extracts a box and updates the memory with the
binarised prediction.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import dfl as dfl_mod
from .matching import normalize_features, posterior, similarity_maps
from .memory import init_memory, init_report, update_memory
from .types import CmeConfig, ContractError, FeatureMap, Mask, Posterior, UpdateReport

BINARIZE_THRESHOLD = 0.5

Box = tuple[int, int, int, int]  # (x, y, w, h)


class DflMode(str, enum.Enum):
    OFF = "off"
    FULL = "full"
    NO_POSTERIOR = "no-posterior"


@dataclass
class FrameResult:
    frame: int
    posterior: Posterior
    mask: Mask
    box: Box
    iou: float
    report: UpdateReport


def pseudo_mask_from_box(box: Box, h: int, w: int) -> Mask:
    x, y, bw, bh = box
    if bw < 1 or bh < 1:
        raise ContractError(f"empty box {box}")
    if x < 0 or y < 0 or x + bw > w or y + bh > h:
        raise ContractError(f"box {box} exceeds the {h}x{w} frame")
    m = np.zeros((h, w))
    m[y:y + bh, x:x + bw] = 1.0
    return Mask(m)


def crop_bounds(prev_box: Box, h: int, w: int) -> tuple[int, int, int, int]:
    """``(y0, y1, x0, x1)`` of a region twice the box size around its centre, clamped."""
    x, y, bw, bh = prev_box
    if bw < 1 or bh < 1:
        raise ContractError(f"empty box {prev_box}")
    x0 = x - bw // 2
    y0 = y - bh // 2
    return max(0, y0), min(h, y0 + 2 * bh), max(0, x0), min(w, x0 + 2 * bw)


def crop_query_region(frame: FeatureMap, prev_box: Box):
    """Returns ``(cropped FeatureMap, (y_offset, x_offset))``."""
    y0, y1, x0, x1 = crop_bounds(prev_box, frame.h, frame.w)
    return FeatureMap(frame.data[y0:y1, x0:x1]), (y0, x0)


def binarize(post: Mask, threshold: float = BINARIZE_THRESHOLD) -> Mask:
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    return Mask((post.data >= threshold).astype(np.float64))


def box_from_mask(mask: Mask) -> Optional[Box]:
    """Bounding box of the largest 4-connected foreground component (first in raster order on ties)."""
    labels, n = ndimage.label(mask.data > 0.5)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    biggest = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == biggest)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def compute_iou(pred: Mask, truth: Mask) -> float:
    if pred.data.shape != truth.data.shape:
        raise ContractError("IoU of masks with different shapes")
    a = pred.data > 0.5
    b = truth.data > 0.5
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = np.minimum((np.arange(h) * arr.shape[0]) // h, arr.shape[0] - 1)
    xs = np.minimum((np.arange(w) * arr.shape[1]) // w, arr.shape[1] - 1)
    return arr[ys][:, xs]


def _paste(values: np.ndarray, offset, shape) -> np.ndarray:
    out = np.zeros(shape)
    y0, x0 = offset
    out[y0:y0 + values.shape[0], x0:x0 + values.shape[1]] = values
    return out


class _DflReadout:
    """Frozen DFL block plus a bias-free logistic probe fitted on frame 0."""

    def __init__(self, params, mode: DflMode, reference: FeatureMap, p1: Mask, probe_seed: int):
        self.params = params
        self.use_posterior = mode is DflMode.FULL
        self.reference = reference
        self.p1 = p1
        _, cache = dfl_mod.dfl_forward(reference, reference, p1, params, self.use_posterior)
        self.probe = dfl_mod.fit_probe(cache.f_hat, p1.flat(), probe_seed)

    def probability(self, query: FeatureMap) -> np.ndarray:
        if (query.h, query.w) == (self.reference.h, self.reference.w):
            ref, p1 = self.reference, self.p1
        else:
            ref = FeatureMap(_resize_nearest(self.reference.data, query.h, query.w))
            p1 = Mask(_resize_nearest(self.p1.data, query.h, query.w))
        _, cache = dfl_mod.dfl_forward(query, ref, p1, self.params, self.use_posterior)
        return dfl_mod.readout_probability(cache.f_hat, self.probe).reshape(query.h, query.w)


def run_tracker(
    sequence: Sequence[tuple[FeatureMap, Mask]],
    cfg: CmeConfig,
    dfl_params=None,
    dfl_mode: DflMode | str = DflMode.OFF,
    probe_seed: int = 0,
) -> list[FrameResult]:
    """Track through ``sequence`` of ``(features, ground-truth fg)`` pairs."""
    dfl_mode = DflMode(dfl_mode)
    if dfl_mode is not DflMode.OFF and dfl_params is None:
        raise ContractError("DFL mode requested without parameters")
    if not sequence:
        raise ContractError("empty sequence")

    frame0, truth0 = sequence[0]
    shape = (frame0.h, frame0.w)
    gt_box = box_from_mask(truth0)
    if gt_box is None:
        raise ContractError("ground truth of the first frame is empty")

    pseudo = pseudo_mask_from_box(gt_box, *shape)
    crop, offset = crop_query_region(frame0, gt_box)
    y0, x0 = offset
    p1 = Mask(pseudo.data[y0:y0 + crop.h, x0:x0 + crop.w])
    query = normalize_features(crop)
    bank = init_memory(query, p1, p1.complement())
    readout = None
    if dfl_mode is not DflMode.OFF:
        readout = _DflReadout(dfl_params, dfl_mode, query, p1, probe_seed)

    results = [FrameResult(0, Posterior(pseudo.data), pseudo, gt_box, compute_iou(pseudo, truth0), init_report(query, bank))]
    box = gt_box
    for t in range(1, len(sequence)):
        frame, truth = sequence[t]
        crop, offset = crop_query_region(frame, box)
        query = normalize_features(crop)
        scores = similarity_maps(query, bank, cfg.topk)
        prob = posterior(scores).data
        if readout is not None:
            prob = 0.5 * (prob + readout.probability(query))
        local = binarize(Mask(prob))
        full_mask = Mask(_paste(local.data, offset, shape))
        new_box = box_from_mask(full_mask)
        if new_box is not None:
            box = new_box
        bank, report = update_memory(bank, query, local, local.complement(), scores.affinity, cfg)
        results.append(FrameResult(
            t,
            Posterior(_paste(prob, offset, shape)),
            full_mask,
            box,
            compute_iou(full_mask, truth),
            report,
        ))
    return results


def mean_iou(results: Sequence[FrameResult]) -> float:
    return float(np.mean([r.iou for r in results]))
