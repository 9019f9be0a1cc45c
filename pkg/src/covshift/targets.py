"""Bounded target functions ``f`` with ``sup |f| <= 1``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from covshift.errors import ConfigError
from covshift.kernels import KernelSpec, as_points


@dataclass(frozen=True, eq=False)
class HalfspaceIndicator:
    """``f(x) = 1{<w, x> + b > 0}``."""

    w: np.ndarray
    b: float = 0.0
    kind = "indicator_halfspace"

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if not np.any(w):
            raise ConfigError("halfspace normal must be nonzero")
        object.__setattr__(self, "w", w)

    def __call__(self, x) -> np.ndarray:
        return (as_points(x) @ self.w + self.b > 0).astype(float)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "w": self.w.tolist(), "b": float(self.b)}


@dataclass(frozen=True)
class TanhCoordinate:
    """``f(x) = tanh(x_j)``."""

    j: int = 0
    kind = "tanh_coordinate"

    def __call__(self, x) -> np.ndarray:
        return np.tanh(as_points(x)[:, self.j])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "j": int(self.j)}


@dataclass(frozen=True, eq=False)
class PlantedRkhs:
    """``f(x) = sum_i alphas[i] K(centers[i], x)``.

    ``sup |f| <= sum |alphas|`` for kernels bounded by one; construction
    rejects coefficient vectors that could break ``|f| <= 1``.
    """

    kernel: KernelSpec
    centers: np.ndarray
    alphas: np.ndarray
    kind = "planted_rkhs"

    def __post_init__(self):
        centers = as_points(self.centers)
        alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        if alphas.shape != (centers.shape[0],):
            raise ConfigError("need one alpha per center")
        if self.kernel.kind != "rbf":
            raise ConfigError("planted targets need a bounded (rbf) kernel")
        if np.abs(alphas).sum() > 1.0 + 1e-12:
            raise ConfigError("sum |alphas| must be <= 1 so that |f| <= 1")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "alphas", alphas)

    def __call__(self, x) -> np.ndarray:
        return self.kernel(as_points(x), self.centers) @ self.alphas

    def rkhs_norm(self) -> float:
        g = self.kernel(self.centers, self.centers)
        return float(np.sqrt(max(self.alphas @ g @ self.alphas, 0.0)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kernel": self.kernel.to_dict(),
                "centers": self.centers.tolist(), "alphas": self.alphas.tolist()}


@dataclass(frozen=True)
class BallIndicator:
    """``f(x) = 1{||x|| < radius}``."""

    radius: float = 1.0
    kind = "indicator_ball"

    def __call__(self, x) -> np.ndarray:
        return (np.linalg.norm(as_points(x), axis=1) < self.radius).astype(float)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "radius": float(self.radius)}


@dataclass(frozen=True, eq=False)
class AtomIndicator:
    """Indicator of a finite set of atoms (exact row match)."""

    atoms: np.ndarray
    kind = "indicator_atoms"

    def __post_init__(self):
        object.__setattr__(self, "atoms", as_points(self.atoms))

    def __call__(self, x) -> np.ndarray:
        x = as_points(x)
        hit = np.zeros(x.shape[0], dtype=bool)
        for a in self.atoms:
            hit |= np.all(x == a, axis=1)
        return hit.astype(float)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "atoms": self.atoms.tolist()}


@dataclass(frozen=True)
class Constant:
    value: float = 0.0
    kind = "constant"

    def __post_init__(self):
        if abs(self.value) > 1:
            raise ConfigError("constant target must satisfy |c| <= 1")

    def __call__(self, x) -> np.ndarray:
        return np.full(as_points(x).shape[0], float(self.value))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": float(self.value)}


def target_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    expected = {
        "indicator_halfspace": {"w", "b"},
        "tanh_coordinate": {"j"},
        "planted_rkhs": {"kernel", "centers", "alphas"},
        "indicator_ball": {"radius"},
        "indicator_atoms": {"atoms"},
        "constant": {"value"},
    }
    if kind not in expected:
        raise ConfigError(f"unknown target kind {kind!r}")
    unknown = set(d) - expected[kind]
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {kind} target")
    if kind == "indicator_halfspace":
        return HalfspaceIndicator(d["w"], float(d.get("b", 0.0)))
    if kind == "tanh_coordinate":
        return TanhCoordinate(int(d.get("j", 0)))
    if kind == "planted_rkhs":
        return PlantedRkhs(KernelSpec.from_dict(d["kernel"]), d["centers"], d["alphas"])
    if kind == "indicator_ball":
        return BallIndicator(float(d.get("radius", 1.0)))
    if kind == "indicator_atoms":
        return AtomIndicator(d["atoms"])
    return Constant(float(d.get("value", 0.0)))
