"""Memory bank lifecycle: first-frame initialisation and per-frame updates.

The compact update classifies every query pixel by its best affinity ``Re``
to the current bank:

* ``Re >= zeta``            merge into the best-matching entry with weight beta
* ``avg <= Re < zeta``      append as a new entry
* ``Re < avg``              discard

where ``avg`` is the mean best affinity of the frame scaled by ``1 / (2e)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .matching import ZERO_NORM, compute_affinity, normalize_features
from .types import (
    CmeConfig,
    ContractError,
    FeatureMap,
    Mask,
    MemoryBank,
    Strategy,
    UpdateReport,
)

AVG_SCALE = 1.0 / (2.0 * math.e)
PAIR_TOL = 1e-9


class EmptyBankError(ContractError):
    pass


@dataclass
class MaxCorrelation:
    values: np.ndarray
    index: np.ndarray


def _check_masks(query: FeatureMap, fg: Mask, bg: Mask) -> None:
    if (fg.h, fg.w) != (query.h, query.w) or (bg.h, bg.w) != (query.h, query.w):
        raise ContractError("mask and feature map dimensions disagree")
    if np.max(np.abs(fg.data + bg.data - 1.0)) > PAIR_TOL:
        raise ContractError("foreground and background masks must sum to 1 per pixel")


def _valid_pixels(query: FeatureMap) -> np.ndarray:
    return np.linalg.norm(query.flat(), axis=1) >= ZERO_NORM


def init_memory(features: FeatureMap, fg: Mask, bg: Mask) -> MemoryBank:
    """One entry per non-degenerate pixel of the (normalised) first frame."""
    _check_masks(features, fg, bg)
    valid = _valid_pixels(features)
    if not valid.any():
        raise EmptyBankError("every pixel of the initial frame has zero norm")
    keys = features.flat()[valid]
    return MemoryBank(keys.copy(), fg.flat()[valid].copy(), bg.flat()[valid].copy(), n_initial=int(valid.sum()))


def init_report(features: FeatureMap, bank: MemoryBank) -> UpdateReport:
    n = features.h * features.w
    return UpdateReport(0, len(bank), n - len(bank), 0, len(bank))


def max_correlations(affinity: np.ndarray) -> MaxCorrelation:
    if affinity.size == 0:
        raise ContractError("empty affinity matrix")
    idx = np.argmax(affinity, axis=1)  # first occurrence -> lowest index on ties
    return MaxCorrelation(affinity[np.arange(affinity.shape[0]), idx], idx)


def _append(bank: MemoryBank, keys, fg, bg) -> MemoryBank:
    return MemoryBank(
        np.concatenate([bank.keys, keys], axis=0),
        np.concatenate([bank.fg, fg]),
        np.concatenate([bank.bg, bg]),
        bank.n_initial,
    )


def cme_update(bank: MemoryBank, query: FeatureMap, fg: Mask, bg: Mask, affinity: np.ndarray, cfg: CmeConfig):
    """Compact merge / expand / discard update. Returns ``(new_bank, report)``.

    ``affinity`` must come from ``compute_affinity(query, bank)``. The input
    bank is not modified.
    """
    n_pix = query.h * query.w
    if affinity.shape != (n_pix, len(bank)):
        raise ContractError(f"affinity shape {affinity.shape} does not match query ({n_pix}) x bank ({len(bank)})")
    if query.c != bank.c:
        raise ContractError("channel mismatch between query and bank")
    _check_masks(query, fg, bg)

    best = max_correlations(affinity)
    re = best.values
    valid = _valid_pixels(query)
    avg = AVG_SCALE * float(np.mean(re))

    q = query.flat()
    qf = fg.flat()
    qb = bg.flat()
    beta = cfg.beta
    out = bank.copy()

    merge = valid & (re >= cfg.zeta)
    expand = valid & (re < cfg.zeta) & (re >= avg)

    # sequential in pixel order: several pixels may hit the same entry
    for i in np.flatnonzero(merge):
        j = best.index[i]
        key = beta * q[i] + (1.0 - beta) * out.keys[j]
        norm = np.linalg.norm(key)
        if norm >= ZERO_NORM:
            out.keys[j] = key / norm
        out.fg[j] = min(1.0, max(0.0, beta * qf[i] + (1.0 - beta) * out.fg[j]))
        out.bg[j] = min(1.0, max(0.0, beta * qb[i] + (1.0 - beta) * out.bg[j]))

    if expand.any():
        out = _append(out, q[expand], qf[expand], qb[expand])

    n_merge = int(merge.sum())
    n_expand = int(expand.sum())
    report = UpdateReport(
        merged_count=n_merge,
        expanded_count=n_expand,
        discarded_count=n_pix - n_merge - n_expand,
        bank_size_before=len(bank),
        bank_size_after=len(out),
        avg_threshold=avg,
    )
    return out, report


def baseline_update(bank: MemoryBank, query: FeatureMap, fg: Mask, bg: Mask, cfg: CmeConfig):
    """Ablation strategies: keep the first frame only, or store every frame."""
    if query.c != bank.c:
        raise ContractError("channel mismatch between query and bank")
    _check_masks(query, fg, bg)
    n_pix = query.h * query.w
    before = len(bank)
    if cfg.strategy is Strategy.INITIAL_ONLY:
        return bank.copy(), UpdateReport(0, 0, n_pix, before, before)
    if cfg.strategy is not Strategy.ALL_FRAMES:
        raise ContractError(f"baseline_update does not handle strategy {cfg.strategy.value}")

    valid = _valid_pixels(query)
    out = _append(bank, query.flat()[valid], fg.flat()[valid], bg.flat()[valid])
    evicted = 0
    cap = cfg.all_frames_cap
    if cap is not None and len(out) - out.n_initial > cap:
        # FIFO over non-initial entries; first-frame entries are never evicted
        evicted = len(out) - out.n_initial - cap
        keep = np.r_[np.arange(out.n_initial), np.arange(out.n_initial + evicted, len(out))]
        out = MemoryBank(out.keys[keep], out.fg[keep], out.bg[keep], out.n_initial)
    n_add = int(valid.sum())
    return out, UpdateReport(0, n_add, n_pix - n_add, before, len(out), None, evicted)


def update_memory(bank, query, fg, bg, affinity, cfg: CmeConfig):
    if cfg.strategy is Strategy.COMPACT:
        return cme_update(bank, query, fg, bg, affinity, cfg)
    return baseline_update(bank, query, fg, bg, cfg)


def memory_trace(frames: Sequence[tuple[FeatureMap, Mask]], cfg: CmeConfig):
    """Initialise on the first (features, fg mask) pair, then update on the rest.

    Returns ``(reports, final_bank)``; ``reports[0]`` describes initialisation.
    """
    if not frames:
        raise ContractError("memory_trace needs at least one frame")
    feats, fg = frames[0]
    feats = normalize_features(feats)
    bank = init_memory(feats, fg, fg.complement())
    reports = [init_report(feats, bank)]
    for raw, fg in frames[1:]:
        feats = normalize_features(raw)
        affinity = compute_affinity(feats, bank)
        bank, rep = update_memory(bank, feats, fg, fg.complement(), affinity, cfg)
        reports.append(rep)
    return reports, bank
