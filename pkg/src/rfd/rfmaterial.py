"""Dielectric/conductive surface materials and their Fresnel reflection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adgraph as ad
from .adgraph import DiffComplex, Var

EPS0 = 8.8541878128e-12
C0 = 299_792_458.0


class UnknownMaterial(KeyError):
    pass


@dataclass
class RFMaterial:
    """Relative permittivity ``eps_r`` (>= 1) and conductivity ``sigma`` in S/m (>= 0)."""

    name: str
    eps_r: object = 1.0
    sigma: object = 0.0

    def __post_init__(self):
        if not np.all(ad._val(self.eps_r) >= 1.0 - 1e-12):
            raise ValueError(f"material {self.name!r}: eps_r must be finite and >= 1")
        if not np.all(np.isfinite(ad._val(self.sigma)) & (ad._val(self.sigma) >= 0.0)):
            raise ValueError(f"material {self.name!r}: sigma must be finite and >= 0")

    def relative_permittivity(self, carrier_freq: float) -> DiffComplex:
        """``eps_r - j sigma / (omega eps0)``: the complex permittivity over eps0."""
        loss = self.sigma * (1.0 / (2.0 * np.pi * carrier_freq * EPS0))
        return DiffComplex(_var(self.eps_r), -_var(loss))

    def to_dict(self) -> dict:
        return {"eps_r": float(ad._val(self.eps_r)), "sigma": float(ad._val(self.sigma))}


def _var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class FresnelCoeffs:
    r_p: DiffComplex
    r_s: DiffComplex


def fresnel(material: RFMaterial, cos_incident, carrier_freq: float) -> FresnelCoeffs:
    """Parallel/perpendicular reflection amplitudes at a half-space boundary.

    Incidence is from free space. ``eta`` is the medium's impedance relative
    to free space, ``1/sqrt(eps)``; the transmitted angle follows Snell's law,
    ``sin_t = sin_i / sqrt(eps)``, with the principal root for ``cos_t``.
    With this convention ``r_p = -r_s`` at normal incidence.
    """
    return fresnel_arrays(material.eps_r, material.sigma, cos_incident, carrier_freq)


def fresnel_arrays(eps_r, sigma, cos_incident, carrier_freq: float) -> FresnelCoeffs:
    """:func:`fresnel` over broadcastable arrays of material parameters."""
    ci = _var(cos_incident)
    if np.any(ci.value <= 0.0) or np.any(ci.value > 1.0 + 1e-12):
        raise ValueError("cos_incident must lie in (0, 1]; cull back faces before calling fresnel")
    loss = _var(sigma) * (1.0 / (2.0 * np.pi * carrier_freq * EPS0))
    eps = DiffComplex(_var(eps_r), -loss)
    sin2_i = 1.0 - ci * ci
    sin2_t = DiffComplex(sin2_i, 0.0) / eps
    cos_t = ad.csqrt(1.0 - sin2_t)
    eta = 1.0 / ad.csqrt(eps)
    cic = DiffComplex(ci, 0.0)
    eci = eta * ci
    r_p = (eci - cos_t) / (eci + cos_t)
    r_s = (cic - eta * cos_t) / (cic + eta * cos_t)
    return FresnelCoeffs(r_p, r_s)


def effective_reflectivity(coeffs: FresnelCoeffs, convention: str = "field") -> DiffComplex:
    """Scalar reflectivity multiplied into a path amplitude.

    ``"field"`` averages the two polarizations after aligning their field
    reference directions, ``(r_s - r_p)/2``: a perfect conductor gives 1 at
    normal incidence. ``"literal"`` is the plain ``(r_p + r_s)/2``, which
    vanishes at normal incidence for every material under the sign
    convention of :func:`fresnel`.
    """
    if convention == "field":
        return (coeffs.r_s - coeffs.r_p) * 0.5
    if convention == "literal":
        return (coeffs.r_p + coeffs.r_s) * 0.5
    raise ValueError(f"unknown polarization convention {convention!r}")


# Approximate values near 60-80 GHz. Building materials use the power-law fits
# of ITU-R P.2040 evaluated at 77 GHz; skin from published mmWave dielectric
# measurements (eps' ~ 6.5, eps'' ~ 9 at 77 GHz).
_PRESETS = {
    "metal": (1.0, 1.0e7),
    "concrete": (5.24, 1.38),
    "wood": (1.99, 0.49),
    "glass": (6.31, 1.21),
    "human_skin": (6.5, 38.0),
    "vacuumlike": (1.0, 0.0),
}
_ALIASES = {"human-skin": "human_skin", "pec": "metal"}


def material_library() -> dict[str, RFMaterial]:
    return {name: RFMaterial(name, e, s) for name, (e, s) in _PRESETS.items()}


def lookup(name: str) -> RFMaterial:
    key = _ALIASES.get(name, name)
    if key not in _PRESETS:
        raise UnknownMaterial(f"unknown material {name!r}; known: {sorted(_PRESETS)}")
    e, s = _PRESETS[key]
    return RFMaterial(key, e, s)
