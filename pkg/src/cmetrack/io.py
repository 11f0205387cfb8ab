"""Text formats: feature maps ("h w c" header + values) and plain PGM masks."""
from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .types import FeatureMap, Mask


class FormatError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_feature_map(fm: FeatureMap) -> str:
    lines = [f"{fm.h} {fm.w} {fm.c}"]
    # repr() gives the shortest string that round-trips a double exactly
    for row in fm.flat():
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def save_feature_map(fm: FeatureMap, path) -> None:
    atomic_write_text(path, format_feature_map(fm))


def parse_feature_map(text: str) -> FeatureMap:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty file: missing header 'h w c'")
    header = lines[0].split()
    if len(header) != 3:
        raise FormatError(f"header must be 'h w c', got {lines[0]!r}")
    dims = []
    for name, tok in zip("hwc", header):
        try:
            val = int(tok)
        except ValueError:
            raise FormatError(f"header field {name} is not an integer: {tok!r}") from None
        if val < 1:
            raise FormatError(f"header field {name} must be positive, got {val}")
        dims.append(val)
    h, w, c = dims
    tokens = " ".join(lines[1:]).split()
    expected = h * w * c
    values = np.empty(expected, dtype=np.float64)
    for k in range(min(len(tokens), expected)):
        try:
            v = float(tokens[k])
        except ValueError:
            raise FormatError(f"value {k + 1} is not a number: {tokens[k]!r}") from None
        if not math.isfinite(v):
            raise FormatError(f"value {k + 1} is not finite: {tokens[k]!r}")
        values[k] = v
    if len(tokens) < expected:
        raise FormatError(f"missing data at value {len(tokens) + 1}: header declares {expected} values, found {len(tokens)}")
    if len(tokens) > expected:
        raise FormatError(f"unexpected data at value {expected + 1}: header declares {expected} values, found {len(tokens)}")
    return FeatureMap(values.reshape(h, w, c))


def load_feature_map(path) -> FeatureMap:
    return parse_feature_map(Path(path).read_text(encoding="utf-8"))


def mask_to_levels(mask: Mask) -> np.ndarray:
    # round half up: 0.5 -> 128
    return np.floor(255.0 * mask.data + 0.5).astype(np.int64)


def format_mask_pgm(mask: Mask) -> str:
    levels = mask_to_levels(mask)
    rows = [" ".join(str(int(v)) for v in row) for row in levels]
    return f"P2\n{mask.w} {mask.h}\n255\n" + "\n".join(rows) + "\n"


def save_mask_pgm(mask: Mask, path) -> None:
    atomic_write_text(path, format_mask_pgm(mask))


def load_mask_pgm(path) -> Mask:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise FormatError("not a plain PGM file (magic 'P2' expected)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
        pixels = [int(t) for t in tokens[4:]]
    except ValueError as exc:
        raise FormatError(f"malformed PGM: {exc}") from None
    if len(pixels) != w * h:
        raise FormatError(f"PGM body has {len(pixels)} pixels, header declares {w * h}")
    return Mask(np.asarray(pixels, dtype=np.float64).reshape(h, w) / maxval)
