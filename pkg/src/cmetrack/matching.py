"""Target-similarity matching against a key/value memory bank.

Query pixels are L2-normalised, correlated with every memory key (cosine
affinity), the affinities are weighted by the stored foreground/background
values, and each pixel is scored by the mean of its K best weighted matches.
A two-way softmax over the (foreground, background) scores gives the rough
posterior.
"""
from __future__ import annotations

import logging

import numpy as np

from .types import ContractError, FeatureMap, MemoryBank, Posterior, ScoreMaps

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12


def normalize_features(fm: FeatureMap) -> FeatureMap:
    """Per-pixel L2 normalisation; pixels with norm below 1e-12 become zero."""
    data = fm.data
    norms = np.sqrt(np.sum(data * data, axis=2, keepdims=True))
    degenerate = norms < ZERO_NORM
    out = np.divide(data, norms, out=np.zeros_like(data), where=~degenerate)
    n_bad = int(degenerate.sum())
    if n_bad:
        log.debug("normalize_features: %d zero-norm pixel(s) mapped to zero", n_bad)
    return FeatureMap(out)


def compute_affinity(query: FeatureMap, bank: MemoryBank) -> np.ndarray:
    """Cosine affinity ``(h*w, N)`` between normalised query pixels and bank keys."""
    if len(bank) == 0:
        raise ContractError("memory bank is empty")
    if query.c != bank.c:
        raise ContractError(f"channel mismatch: query has {query.c}, bank has {bank.c}")
    return query.flat() @ bank.keys.T


def retrieve_scores(affinity: np.ndarray, bank: MemoryBank) -> tuple[np.ndarray, np.ndarray]:
    # elementwise along the bank axis: one weighted score per (pixel, entry)
    if affinity.shape[1] != len(bank):
        raise ContractError(f"affinity has {affinity.shape[1]} columns, bank has {len(bank)} entries")
    return affinity * bank.fg[None, :], affinity * bank.bg[None, :]


def topk_average(v, k: int) -> float:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ContractError("topk_average of an empty vector")
    return float(topk_average_rows(v[None, :], k)[0])


def topk_average_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mean of the ``min(k, n)`` largest values.

    The selected values are sorted before summation so the result does not
    depend on column order.
    """
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    n = scores.shape[1]
    if n == 0:
        raise ContractError("topk_average of an empty vector")
    k = min(k, n)
    top = np.partition(scores, n - k, axis=1)[:, n - k:]
    top = np.sort(top, axis=1)
    return top.sum(axis=1) / k


def similarity_maps(query: FeatureMap, bank: MemoryBank, k: int) -> ScoreMaps:
    """Foreground/background score maps of a normalised query against ``bank``."""
    affinity = compute_affinity(query, bank)
    s_fg, s_bg = retrieve_scores(affinity, bank)
    shape = (query.h, query.w)
    return ScoreMaps(
        fg=topk_average_rows(s_fg, k).reshape(shape),
        bg=topk_average_rows(s_bg, k).reshape(shape),
        affinity=affinity,
    )


def posterior(scores: ScoreMaps) -> Posterior:
    m = np.maximum(scores.fg, scores.bg)
    e_fg = np.exp(scores.fg - m)
    e_bg = np.exp(scores.bg - m)
    return Posterior(e_fg / (e_fg + e_bg))
