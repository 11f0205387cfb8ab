"""Slow, loop-based reference implementations used by the test-suite.

Nothing here imports the optimised modules; only the core value types are
shared. Summation is strictly sequential in index order.
"""
from __future__ import annotations

import math

from .types import CmeConfig, ContractError, Strategy, UpdateReport

_ZERO = 1e-12


def _pixels(fm):
    h, w, c = fm.data.shape
    return [[float(fm.data[y, x, k]) for k in range(c)] for y in range(h) for x in range(w)]


def _dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def _unit(v):
    n = math.sqrt(_dot(v, v))
    if n < _ZERO:
        return [0.0] * len(v), False
    return [x / n for x in v], True


def naive_normalize(fm):
    return [_unit(p)[0] for p in _pixels(fm)]


def naive_affinity(query, bank):
    """``query`` is a normalised FeatureMap; returns a list of rows."""
    keys = [[float(x) for x in row] for row in bank.keys]
    if not keys:
        raise ContractError("memory bank is empty")
    if query.data.shape[2] != len(keys[0]):
        raise ContractError("channel mismatch")
    rows = []
    for q in _pixels(query):
        row = []
        for key in keys:
            s = 0.0
            for k in range(len(q)):
                s += q[k] * key[k]
            row.append(s)
        rows.append(row)
    return rows


def naive_retrieve(affinity, fg, bg):
    out_f, out_b = [], []
    for row in affinity:
        out_f.append([a * float(v) for a, v in zip(row, fg)])
        out_b.append([a * float(v) for a, v in zip(row, bg)])
    return out_f, out_b


def naive_topk(v, k):
    v = [float(x) for x in v]
    if not v:
        raise ContractError("empty vector")
    if k < 1:
        raise ContractError("K must be >= 1")
    top = sorted(v, reverse=True)[:min(k, len(v))]
    s = 0.0
    for x in top:
        s += x
    return s / len(top)


def naive_similarity(query, bank, k):
    """Full pipeline from a raw query map: returns ``(S_f, S_b)`` as flat lists."""
    unit = naive_normalize(query)
    keys = [[float(x) for x in row] for row in bank.keys]
    s_f, s_b = [], []
    for q in unit:
        row = [_dot(q, key) for key in keys]
        rf, rb = naive_retrieve([row], bank.fg, bank.bg)
        s_f.append(naive_topk(rf[0], k))
        s_b.append(naive_topk(rb[0], k))
    return s_f, s_b


def naive_posterior(s_f, s_b):
    out = []
    for a, b in zip(s_f, s_b):
        out.append(math.exp(a) / (math.exp(a) + math.exp(b)))
    return out


def naive_argmax(row):
    best_j, best = 0, row[0]
    for j in range(1, len(row)):
        if row[j] > best:
            best_j, best = j, row[j]
    return best, best_j


def naive_cme_trace(frames, cfg: CmeConfig, return_bank: bool = False):
    """Replay memory initialisation and per-frame updates for ``(features, fg)`` pairs."""
    feats0, mask0 = frames[0]
    keys, fgs, bgs = [], [], []
    pix0 = _pixels(feats0)
    m0 = [float(v) for v in mask0.data.reshape(-1)]
    for p, m in zip(pix0, m0):
        u, ok = _unit(p)
        if ok:
            keys.append(u)
            fgs.append(m)
            bgs.append(1.0 - m)
    if not keys:
        raise ContractError("every pixel of the initial frame has zero norm")
    n_initial = len(keys)
    reports = [UpdateReport(0, len(keys), len(pix0) - len(keys), 0, len(keys))]

    for feats, mask in frames[1:]:
        raw = _pixels(feats)
        fvals = [float(v) for v in mask.data.reshape(-1)]
        units = [_unit(p) for p in raw]
        before = len(keys)

        if cfg.strategy is Strategy.INITIAL_ONLY:
            reports.append(UpdateReport(0, 0, len(raw), before, before))
            continue

        if cfg.strategy is Strategy.ALL_FRAMES:
            added = 0
            for (u, ok), f in zip(units, fvals):
                if ok:
                    keys.append(u)
                    fgs.append(f)
                    bgs.append(1.0 - f)
                    added += 1
            evicted = 0
            if cfg.all_frames_cap is not None:
                while len(keys) - n_initial > cfg.all_frames_cap:
                    del keys[n_initial], fgs[n_initial], bgs[n_initial]
                    evicted += 1
            reports.append(UpdateReport(0, added, len(raw) - added, before, len(keys), None, evicted))
            continue

        best = []
        for u, _ in units:
            best.append(naive_argmax([_dot(u, key) for key in keys]))
        total = 0.0
        for re, _ in best:
            total += re
        avg = (total / len(best)) / (2.0 * math.e)

        beta = cfg.beta
        merged, appended = 0, []
        for i, ((u, ok), (re, j)) in enumerate(zip(units, best)):
            if not ok:
                continue
            if re >= cfg.zeta:
                mixed = [beta * a + (1.0 - beta) * b for a, b in zip(u, keys[j])]
                n = math.sqrt(_dot(mixed, mixed))
                if n >= _ZERO:
                    keys[j] = [x / n for x in mixed]
                fgs[j] = min(1.0, max(0.0, beta * fvals[i] + (1.0 - beta) * fgs[j]))
                bgs[j] = min(1.0, max(0.0, beta * (1.0 - fvals[i]) + (1.0 - beta) * bgs[j]))
                merged += 1
            elif re >= avg:
                appended.append((u, fvals[i], 1.0 - fvals[i]))
        for u, f, b in appended:
            keys.append(u)
            fgs.append(f)
            bgs.append(b)
        reports.append(UpdateReport(merged, len(appended), len(raw) - merged - len(appended), before, len(keys), avg))

    if return_bank:
        return reports, (keys, fgs, bgs)
    return reports


def _relu(x):
    return x if x > 0.0 else 0.0


def _matvec(mat, v):
    out = []
    for row in mat:
        s = 0.0
        for a, b in zip(row, v):
            s += float(a) * b
        out.append(s)
    return out


def naive_dfl_forward(query, reference, p1_fg, params, use_posterior: bool = True):
    """Returns the output features as a list of per-pixel lists."""
    if query.data.shape != reference.data.shape:
        raise ContractError("query and reference must share h, w, c")
    fq = _pixels(query)
    fr = _pixels(reference)
    p1 = [float(v) for v in p1_fg.data.reshape(-1)]
    if len(p1) != len(fq):
        raise ContractError("mask does not match the query grid")
    a = [_matvec(params.W_F, f) for f in fq]
    b = [_matvec(params.W_R, r) for r in fr]
    rv = [[_relu(x) for x in _matvec(params.W_v, r)] for r in fr]
    out = []
    for i, f in enumerate(fq):
        z = [_dot(a[i], b[j]) for j in range(len(fr))]
        zmax = max(z)
        ex = [math.exp(x - zmax) for x in z]
        tot = 0.0
        for e in ex:
            tot += e
        d = len(rv[0])
        v = [0.0] * d
        for j in range(len(fr)):
            wgt = ex[j] / tot
            for k in range(d):
                v[k] += wgt * rv[j][k]
        cat = v + [_relu(x) for x in _matvec(params.W_v, f)]
        ft = [_relu(x) for x in _matvec(params.W_c, cat)]
        gate = p1[i] if use_posterior else 1.0
        out.append([x * gate for x in ft])
    return out


def naive_softmax_weights(query, reference, params):
    """Row-normalised attention weights only (for the single-pixel check)."""
    fq = _pixels(query)
    fr = _pixels(reference)
    rows = []
    for f in fq:
        af = _matvec(params.W_F, f)
        z = [_dot(af, _matvec(params.W_R, r)) for r in fr]
        zmax = max(z)
        ex = [math.exp(x - zmax) for x in z]
        tot = sum(ex)
        rows.append([e / tot for e in ex])
    return rows
