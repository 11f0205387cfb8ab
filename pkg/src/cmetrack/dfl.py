"""Deformable feature learning block: pixel-to-global attention.

Every query pixel attends over the whole reference map with learned bilinear
similarities, aggregates ReLU-projected reference features, concatenates the
result with its own projection, compresses it back to ``d`` channels and
finally scales it by the initial-frame foreground probability at that pixel.

Shapes (``n = h*w``): W_F, W_R, W_v are ``(d, c)``, W_c is ``(d, 2d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import FormatError, atomic_write_text
from .types import ContractError, FeatureMap, Mask, make_rng

PARAM_NAMES = ("W_F", "W_R", "W_v", "W_c")
PARAMS_MAGIC = "dfl-params v1"


@dataclass
class DflParams:
    W_F: np.ndarray
    W_R: np.ndarray
    W_v: np.ndarray
    W_c: np.ndarray
    seed: int | None = None

    @property
    def c(self) -> int:
        return self.W_F.shape[1]

    @property
    def d(self) -> int:
        return self.W_F.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "DflParams":
        return DflParams(*(a.copy() for a in self.arrays().values()), seed=self.seed)

    def check(self) -> None:
        d, c = self.d, self.c
        want = {"W_F": (d, c), "W_R": (d, c), "W_v": (d, c), "W_c": (d, 2 * d)}
        for name, arr in self.arrays().items():
            if arr.shape != want[name]:
                raise ContractError(f"{name} has shape {arr.shape}, expected {want[name]}")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} has non-finite entries")


@dataclass
class DflIntermediates:
    z: np.ndarray
    d_w: np.ndarray
    v: np.ndarray
    f_tilde: np.ndarray
    f_hat: np.ndarray
    # pre-activations and inputs kept for the backward pass
    q_proj: np.ndarray
    r_proj: np.ndarray
    r_val_pre: np.ndarray
    q_val_pre: np.ndarray
    concat: np.ndarray
    out_pre: np.ndarray
    gate: np.ndarray


def dfl_init_params(seed: int, c: int, d: int | None = None) -> DflParams:
    """Uniform Glorot-style init; W_F, W_R, W_v, W_c are drawn in that order."""
    d = c if d is None else d
    if c < 1 or d < 1:
        raise ContractError("c and d must be >= 1")
    rng = make_rng(seed)
    a = np.sqrt(6.0 / (c + d))
    a_c = np.sqrt(6.0 / (3 * d))
    return DflParams(
        W_F=rng.uniform(-a, a, (d, c)),
        W_R=rng.uniform(-a, a, (d, c)),
        W_v=rng.uniform(-a, a, (d, c)),
        W_c=rng.uniform(-a_c, a_c, (d, 2 * d)),
        seed=seed,
    )


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_inputs(query: FeatureMap, reference: FeatureMap, p1_fg: Mask, params: DflParams) -> None:
    if query.data.shape != reference.data.shape:
        raise ContractError(f"query {query.data.shape} and reference {reference.data.shape} must share h, w, c")
    if (p1_fg.h, p1_fg.w) != (query.h, query.w):
        raise ContractError("initial foreground mask must match the query grid")
    if params.c != query.c:
        raise ContractError(f"params expect c={params.c}, features have c={query.c}")
    params.check()


def dfl_forward(query: FeatureMap, reference: FeatureMap, p1_fg: Mask, params: DflParams, use_posterior: bool = True):
    """Return ``(FeatureMap of d channels, DflIntermediates)``.

    ``use_posterior=False`` skips the final scaling by ``p1_fg`` (the DFL_N
    ablation).
    """
    _check_inputs(query, reference, p1_fg, params)
    f = query.flat()
    r = reference.flat()
    q_proj = f @ params.W_F.T
    r_proj = r @ params.W_R.T
    z = q_proj @ r_proj.T
    d_w = _softmax_rows(z)
    r_val_pre = r @ params.W_v.T
    v = d_w @ np.maximum(r_val_pre, 0.0)
    q_val_pre = f @ params.W_v.T
    concat = np.concatenate([v, np.maximum(q_val_pre, 0.0)], axis=1)
    out_pre = concat @ params.W_c.T
    f_tilde = np.maximum(out_pre, 0.0)
    gate = p1_fg.flat().copy() if use_posterior else np.ones(f.shape[0])
    f_hat = f_tilde * gate[:, None]
    cache = DflIntermediates(z, d_w, v, f_tilde, f_hat, q_proj, r_proj, r_val_pre, q_val_pre, concat, out_pre, gate)
    return FeatureMap(f_hat.reshape(query.h, query.w, params.d)), cache


def dfl_backward(loss_grad: np.ndarray, cache: DflIntermediates, query: FeatureMap, reference: FeatureMap, params: DflParams) -> DflParams:
    """Gradients of ``sum(loss_grad * f_hat)`` with respect to every weight matrix."""
    n, d = cache.f_hat.shape
    g = np.asarray(loss_grad, dtype=np.float64)
    stale = (
        g.size != n * d
        or d != params.d
        or query.h * query.w != n
        or reference.h * reference.w != cache.z.shape[1]
    )
    if stale:
        raise ContractError("cached intermediates do not match the given inputs/gradient")
    g = g.reshape(n, d)
    f = query.flat()
    r = reference.flat()

    d_out_pre = g * cache.gate[:, None] * (cache.out_pre > 0)
    gW_c = d_out_pre.T @ cache.concat
    d_concat = d_out_pre @ params.W_c
    d_v = d_concat[:, :d]
    d_q_val_pre = d_concat[:, d:] * (cache.q_val_pre > 0)

    r_val = np.maximum(cache.r_val_pre, 0.0)
    d_dw = d_v @ r_val.T
    d_r_val_pre = (cache.d_w.T @ d_v) * (cache.r_val_pre > 0)
    gW_v = d_q_val_pre.T @ f + d_r_val_pre.T @ r

    # softmax Jacobian, row by row
    d_z = cache.d_w * (d_dw - np.sum(d_dw * cache.d_w, axis=1, keepdims=True))
    gW_F = (d_z @ cache.r_proj).T @ f
    gW_R = (d_z.T @ cache.q_proj).T @ r
    return DflParams(gW_F, gW_R, gW_v, gW_c, seed=params.seed)


def dfl_loss(query, reference, p1_fg, params, loss_grad, use_posterior=True) -> float:
    out, _ = dfl_forward(query, reference, p1_fg, params, use_posterior)
    return float(np.sum(np.asarray(loss_grad).reshape(out.data.shape) * out.data))


def finite_difference_grads(query, reference, p1_fg, params, loss_grad, step=1e-5, use_posterior=True) -> DflParams:
    """Central differences of ``dfl_loss``, one weight at a time."""
    grads = {}
    for name in PARAM_NAMES:
        arr = getattr(params, name)
        out = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            lp = dfl_loss(query, reference, p1_fg, params, loss_grad, use_posterior)
            arr[idx] = orig - step
            lm = dfl_loss(query, reference, p1_fg, params, loss_grad, use_posterior)
            arr[idx] = orig
            out[idx] = (lp - lm) / (2.0 * step)
        grads[name] = out
    return DflParams(**grads, seed=params.seed)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    Central differences at step 1e-5 carry roughly 1e-11 of absolute rounding
    noise, so gradients smaller than ``floor`` are compared in absolute terms.
    Pass ``floor=0`` for the raw ratio (entries where both sides are exactly
    zero then count as exact).
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(scale == 0.0, 0.0, diff / np.where(scale == 0.0, 1.0, scale))


# --- readout and toy training ----------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def readout_probability(f_hat: np.ndarray, probe: np.ndarray) -> np.ndarray:
    return _sigmoid(f_hat.reshape(-1, probe.shape[0]) @ probe)


def _balanced_weights(target: np.ndarray) -> np.ndarray:
    n_pos = target.sum()
    n_neg = target.size - n_pos
    w = np.zeros_like(target)
    if n_pos > 0:
        w += target / (2.0 * n_pos)
    if n_neg > 0:
        w += (1.0 - target) / (2.0 * n_neg)
    return w


def fit_probe(features: np.ndarray, target: np.ndarray, seed: int, steps: int = 200, lr: float = 2.0) -> np.ndarray:
    """Bias-free logistic probe fitted by gradient descent on class-balanced cross-entropy."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    probe = make_rng(seed).uniform(-0.01, 0.01, x.shape[1])
    w = _balanced_weights(y)
    for _ in range(steps):
        q = _sigmoid(x @ probe)
        probe -= lr * (x.T @ (w * (q - y)))
    return probe


def balanced_bce(q: np.ndarray, target: np.ndarray) -> float:
    q = np.clip(q, 1e-12, 1 - 1e-12)
    y = target.reshape(-1)
    return float(-np.sum(_balanced_weights(y) * (y * np.log(q) + (1 - y) * np.log(1 - q))))


def train_dfl(params: DflParams, probe: np.ndarray, query, reference, p1_fg, target: Mask, steps: int = 50, lr: float = 0.5, use_posterior: bool = True):
    """Plain gradient descent on the readout's balanced cross-entropy.

    Updates copies of both the DFL weights and the probe; returns
    ``(params, probe, losses)``.
    """
    params = params.copy()
    probe = np.array(probe, dtype=np.float64)
    y = target.flat()
    w = _balanced_weights(y)
    losses = []
    for _ in range(steps):
        out, cache = dfl_forward(query, reference, p1_fg, params, use_posterior)
        f_hat = cache.f_hat
        q = readout_probability(f_hat, probe)
        losses.append(balanced_bce(q, y))
        dlogit = w * (q - y)
        grads = dfl_backward(np.outer(dlogit, probe), cache, query, reference, params)
        probe -= lr * (f_hat.T @ dlogit)
        for name in PARAM_NAMES:
            getattr(params, name)[...] -= lr * getattr(grads, name)
    return params, probe, losses


# --- parameter files ---------------------------------------------------------

def format_params(params: DflParams) -> str:
    lines = [PARAMS_MAGIC, f"{params.c} {params.d}"]
    for name, arr in params.arrays().items():
        lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in arr)
    return "\n".join(lines) + "\n"


def save_params(params: DflParams, path) -> None:
    atomic_write_text(path, format_params(params))


def load_params(path) -> DflParams:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or lines[0].strip() != PARAMS_MAGIC:
        raise FormatError(f"missing '{PARAMS_MAGIC}' header")
    try:
        c, d = (int(t) for t in lines[1].split())
    except (IndexError, ValueError):
        raise FormatError("second line must be 'c d'") from None
    arrays = {}
    pos = 2
    for name in PARAM_NAMES:
        head = lines[pos].split() if pos < len(lines) else []
        if len(head) != 3 or head[0] != name:
            raise FormatError(f"expected '{name} rows cols' at line {pos + 1}")
        rows, cols = int(head[1]), int(head[2])
        body = lines[pos + 1:pos + 1 + rows]
        try:
            arr = np.array([[float(t) for t in ln.split()] for ln in body], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{name}: {exc}") from None
        if arr.shape != (rows, cols):
            raise FormatError(f"{name}: expected {rows}x{cols} values")
        arrays[name] = arr
        pos += 1 + rows
    params = DflParams(**arrays)
    if (params.c, params.d) != (c, d):
        raise FormatError("matrix shapes disagree with the declared c, d")
    params.check()
    return params
