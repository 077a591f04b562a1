"""Rigid + uniform-scale pose and per-vertex displacement of meshes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import adgraph as ad
from ..adgraph import Var
from .mesh import TriangleMesh

_SERIES_BELOW = 1e-4  # theta^2 threshold for the Taylor branch


def _rodrigues_coeffs(theta2):
    """A = sin(th)/th and B = (1 - cos(th))/th^2 as functions of th^2.

    Fused so the removable singularity at th = 0 never reaches the tape.
    """
    x = float(ad._val(theta2))
    if x < _SERIES_BELOW:
        a = 1.0 - x / 6.0 + x * x / 120.0 - x ** 3 / 5040.0
        b = 0.5 - x / 24.0 + x * x / 720.0 - x ** 3 / 40320.0
        da = -1.0 / 6.0 + x / 60.0 - x * x / 1680.0
        db = -1.0 / 24.0 + x / 360.0 - x * x / 13440.0
    else:
        th = np.sqrt(x)
        s, c = np.sin(th), np.cos(th)
        a = s / th
        b = (1.0 - c) / x
        da = (th * c - s) / (2.0 * th ** 3)
        db = (th * s - 2.0 * (1.0 - c)) / (2.0 * x * x)
    return (ad.custom(a, (theta2,), lambda g: (g * da,)),
            ad.custom(b, (theta2,), lambda g: (g * db,)))


def skew(w) -> Var:
    w = w if isinstance(w, Var) else Var(w)
    z = Var(0.0)
    return ad.stack([ad.stack([z, -w[2], w[1]]),
                     ad.stack([w[2], z, -w[0]]),
                     ad.stack([-w[1], w[0], z])])


def rotation_matrix(axis_angle) -> Var:
    """Exponential map so(3) -> SO(3); exactly the identity at the zero vector."""
    w = axis_angle if isinstance(axis_angle, Var) else Var(axis_angle)
    a, b = _rodrigues_coeffs(ad.dot(w, w))
    k = skew(w)
    return np.eye(3) + a * k + b * ad.matmul(k, k)


@dataclass
class RigidParam:
    """World pose ``v' = R(rotation) (scale * v) + translation``.

    ``scale`` is a plain positive value here; optimizers should feed
    ``exp(log_scale)`` so positivity holds by construction.
    """

    translation: Var
    rotation: Var
    scale: Var

    def __post_init__(self):
        self.translation = _as_var(self.translation, (3,))
        self.rotation = _as_var(self.rotation, (3,))
        self.scale = _as_var(self.scale, ())

    @classmethod
    def identity(cls) -> "RigidParam":
        return cls(np.zeros(3), np.zeros(3), 1.0)

    def values(self) -> dict:
        return {"translation": self.translation.value.tolist(),
                "rotation": self.rotation.value.tolist(),
                "scale": float(self.scale.value)}

    def apply_numeric(self, points) -> np.ndarray:
        r = rotation_matrix(self.rotation.value).value
        return (float(self.scale.value) * np.asarray(points, float)) @ r.T + self.translation.value


@dataclass
class DisplacementParam:
    offsets: Var
    weight: float = 0.1

    def __post_init__(self):
        self.offsets = _as_var(self.offsets, None)

    @classmethod
    def zeros(cls, n_vertices: int, weight: float = 0.1) -> "DisplacementParam":
        return cls(np.zeros((n_vertices, 3)), weight)

    def regularizer(self) -> Var:
        """``weight * mean_i |offset_i|^2``."""
        return self.weight * ad.mean(ad.sum(self.offsets * self.offsets, axis=1))


def _as_var(x, shape) -> Var:
    v = x if isinstance(x, Var) else Var(x)
    if shape is not None and v.shape != shape:
        raise ValueError(f"expected shape {shape}, got {v.shape}")
    return v


def transform_mesh(mesh: TriangleMesh, rp: RigidParam, dp: DisplacementParam | None = None) -> Var:
    """World-space vertices (V, 3) as a tape value."""
    base = Var(mesh.vertices)
    if dp is not None:
        if dp.offsets.shape != mesh.vertices.shape:
            raise ValueError("displacement shape does not match the mesh")
        base = base + dp.offsets
    r = rotation_matrix(rp.rotation)
    return ad.matmul(rp.scale * base, r.T) + rp.translation
