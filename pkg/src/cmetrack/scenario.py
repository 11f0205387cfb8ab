"""Synthetic feature sequences with ground-truth masks.

The target is an axis-aligned rectangle whose aspect ratio oscillates
(deformation) and whose centre moves linearly, reflecting off the frame
borders. Target features rotate in a fixed plane of feature space by
``appearance_drift_rate`` radians per frame. A distractor, when present, sits
at cosine ``similarity`` to the target's current appearance. Background pixels
share one base direction orthogonal to the target plus Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from .types import ContractError, FeatureMap, Mask, make_rng


class ScenarioError(ContractError):
    pass


@dataclass(frozen=True)
class Trajectory:
    center: tuple[float, float]                  # (y, x) at frame 0
    radius: tuple[float, float]                  # half extents (y, x)
    velocity: tuple[float, float] = (0.0, 0.0)   # pixels per frame
    deformation: float = 0.0                     # relative aspect oscillation amplitude
    deformation_period: float = 10.0

    def at(self, t: int, h: int, w: int):
        """Centre and half extents at frame ``t``."""
        phase = math.sin(2.0 * math.pi * t / self.deformation_period) if self.deformation else 0.0
        ry = self.radius[0] * (1.0 + self.deformation * phase)
        rx = self.radius[1] * (1.0 - self.deformation * phase)
        my = self.radius[0] * (1.0 + self.deformation)
        mx = self.radius[1] * (1.0 + self.deformation)
        cy = _reflect(self.center[0] + self.velocity[0] * t, my, h - 1 - my)
        cx = _reflect(self.center[1] + self.velocity[1] * t, mx, w - 1 - mx)
        return cy, cx, ry, rx

    def validate(self, h: int, w: int, what: str) -> None:
        if min(self.radius) <= 0:
            raise ScenarioError(f"{what}.radius must be positive")
        if not 0.0 <= self.deformation < 1.0:
            raise ScenarioError(f"{what}.deformation must lie in [0, 1)")
        if min(self.radius) * (1.0 - self.deformation) < 0.5:
            raise ScenarioError(f"{what} shrinks below one pixel")
        if self.deformation_period <= 0:
            raise ScenarioError(f"{what}.deformation_period must be positive")
        my = self.radius[0] * (1.0 + self.deformation)
        mx = self.radius[1] * (1.0 + self.deformation)
        if 2 * my > h - 1 or 2 * mx > w - 1:
            raise ScenarioError(f"{what} does not fit inside the {h}x{w} frame")
        if not (my <= self.center[0] <= h - 1 - my and mx <= self.center[1] <= w - 1 - mx):
            raise ScenarioError(f"{what}.center starts outside the frame")


def _reflect(v: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return lo
    span = hi - lo
    u = (v - lo) % (2.0 * span)
    return lo + (u if u <= span else 2.0 * span - u)


@dataclass(frozen=True)
class Distractor:
    trajectory: Trajectory
    similarity: float = 0.5


@dataclass(frozen=True)
class SyntheticScenario:
    h: int
    w: int
    c: int
    frame_count: int
    trajectory: Trajectory
    appearance_drift_rate: float = 0.0
    distractor: Optional[Distractor] = None
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.h, self.w) < 2:
            raise ScenarioError("h and w must be at least 2")
        if self.c < 4:
            raise ScenarioError("c must be at least 4 (target, drift, background and distractor directions)")
        if self.frame_count < 1:
            raise ScenarioError("frame_count must be positive")
        if self.noise_sigma < 0:
            raise ScenarioError("noise_sigma must be non-negative")
        self.trajectory.validate(self.h, self.w, "trajectory")
        if self.distractor is not None:
            if not 0.0 <= self.distractor.similarity <= 1.0:
                raise ScenarioError("distractor.similarity must lie in [0, 1]")
            self.distractor.trajectory.validate(self.h, self.w, "distractor.trajectory")

    def with_seed(self, seed: int) -> "SyntheticScenario":
        return replace(self, seed=int(seed))

    def as_dict(self) -> dict:
        def traj(t: Trajectory) -> dict:
            return {
                "center": list(t.center),
                "radius": list(t.radius),
                "velocity": list(t.velocity),
                "deformation": t.deformation,
                "deformation_period": t.deformation_period,
            }

        out = {
            "h": self.h, "w": self.w, "c": self.c,
            "frame_count": self.frame_count,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "appearance_drift_rate": self.appearance_drift_rate,
            "trajectory": traj(self.trajectory),
        }
        if self.distractor is not None:
            out["distractor"] = {"similarity": self.distractor.similarity, "trajectory": traj(self.distractor.trajectory)}
        return out


def _pair(value, key: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        return float(value), float(value)
    if isinstance(value, list) and len(value) == 2:
        return float(value[0]), float(value[1])
    raise ScenarioError(f"{key} must be a number or a [y, x] pair")


def _require(table: dict, key: str, prefix: str = ""):
    if key not in table:
        raise ScenarioError(f"missing required key '{prefix}{key}'")
    return table[key]


def _trajectory(table: dict, prefix: str) -> Trajectory:
    if not isinstance(table, dict):
        raise ScenarioError(f"'{prefix.rstrip('.')}' must be a table")
    return Trajectory(
        center=_pair(_require(table, "center", prefix), prefix + "center"),
        radius=_pair(_require(table, "radius", prefix), prefix + "radius"),
        velocity=_pair(table.get("velocity", 0.0), prefix + "velocity"),
        deformation=float(table.get("deformation", 0.0)),
        deformation_period=float(table.get("deformation_period", 10.0)),
    )


def scenario_from_dict(doc: dict) -> SyntheticScenario:
    distractor = None
    if "distractor" in doc:
        dt = doc["distractor"]
        distractor = Distractor(
            trajectory=_trajectory(_require(dt, "trajectory", "distractor."), "distractor.trajectory."),
            similarity=float(dt.get("similarity", 0.5)),
        )
    try:
        spec = SyntheticScenario(
            h=int(_require(doc, "h")),
            w=int(_require(doc, "w")),
            c=int(_require(doc, "c")),
            frame_count=int(_require(doc, "frame_count")),
            trajectory=_trajectory(_require(doc, "trajectory"), "trajectory."),
            appearance_drift_rate=float(doc.get("appearance_drift_rate", 0.0)),
            distractor=distractor,
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            seed=int(doc.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"invalid value: {exc}") from None
    spec.validate()
    return spec


def load_scenario(path) -> SyntheticScenario:
    try:
        doc = tomli.loads(Path(path).read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)


def _rect_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)


@dataclass
class _Basis:
    target: np.ndarray
    drift: np.ndarray
    background: np.ndarray
    distractor: np.ndarray


def _basis(rng: np.random.Generator, c: int) -> _Basis:
    q, _ = np.linalg.qr(rng.standard_normal((c, c)))
    return _Basis(q[:, 0], q[:, 1], q[:, 2], q[:, 3])


def generate_scenario(spec: SyntheticScenario) -> list[tuple[FeatureMap, Mask]]:
    """Deterministic list of ``(features, ground-truth foreground)`` per frame."""
    spec.validate()
    rng = make_rng(spec.seed)
    basis = _basis(rng, spec.c)
    frames = []
    for t in range(spec.frame_count):
        angle = spec.appearance_drift_rate * t
        target_vec = math.cos(angle) * basis.target + math.sin(angle) * basis.drift
        data = np.broadcast_to(basis.background, (spec.h, spec.w, spec.c)).copy()

        if spec.distractor is not None:
            rho = spec.distractor.similarity
            dvec = rho * target_vec + math.sqrt(max(0.0, 1.0 - rho * rho)) * basis.distractor
            dmask = _rect_mask(spec.h, spec.w, *spec.distractor.trajectory.at(t, spec.h, spec.w))
            data[dmask] = dvec

        truth = _rect_mask(spec.h, spec.w, *spec.trajectory.at(t, spec.h, spec.w))
        data[truth] = target_vec
        data += spec.noise_sigma * rng.standard_normal(data.shape)
        frames.append((FeatureMap(data), Mask(truth.astype(np.float64))))
    return frames
