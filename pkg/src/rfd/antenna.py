"""MIMO antenna arrays: element layout, radiation pattern, virtual aperture, presets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adgraph as ad
from .adgraph import Var
from .ifsignal import ChirpConfig
from .rfmaterial import C0


@dataclass(frozen=True)
class RadiationPattern:
    """``isotropic`` (gain 1) or ``cosine_power`` (``max(0, cos)^exponent``)."""

    kind: str = "cosine_power"
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "cosine_power"):
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.exponent < 0:
            raise ValueError("pattern exponent must be >= 0")


@dataclass
class AntennaArray:
    """Element positions in the radar frame; the radar looks along its local +z."""

    tx_positions: np.ndarray
    rx_positions: np.ndarray
    pattern: RadiationPattern = field(default_factory=RadiationPattern)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.tx_positions = np.asarray(self.tx_positions, float).reshape(-1, 3)
        self.rx_positions = np.asarray(self.rx_positions, float).reshape(-1, 3)
        self.rotation = np.asarray(self.rotation, float).reshape(3, 3)
        self.position = np.asarray(self.position, float).reshape(3)
        if len(self.tx_positions) == 0 or len(self.rx_positions) == 0:
            raise ValueError("an array needs at least one TX and one RX element")
        every = np.vstack([self.tx_positions, self.rx_positions])
        if len(np.unique(np.round(every, 12), axis=0)) != len(every):
            raise ValueError("antenna element positions must be pairwise distinct")

    @property
    def n_tx(self) -> int:
        return len(self.tx_positions)

    @property
    def n_rx(self) -> int:
        return len(self.rx_positions)

    @property
    def n_virtual(self) -> int:
        return self.n_tx * self.n_rx

    @property
    def boresight(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def to_world(self, local) -> np.ndarray:
        return np.asarray(local, float) @ self.rotation.T + self.position

    def tx_world(self) -> np.ndarray:
        return self.to_world(self.tx_positions)

    def rx_world(self) -> np.ndarray:
        return self.to_world(self.rx_positions)

    def element_order(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n_tx) for j in range(self.n_rx)]

    def swapped(self, tx: int, rx: int) -> "AntennaArray":
        """Copy with TX element ``tx`` and RX element ``rx`` trading places."""
        t, r = self.tx_positions.copy(), self.rx_positions.copy()
        t[tx], r[rx] = self.rx_positions[rx], self.tx_positions[tx]
        return AntennaArray(t, r, self.pattern, self.rotation, self.position)


def virtual_array(array: AntennaArray) -> list[tuple[int, int, np.ndarray]]:
    """``(tx, rx, tx_pos + rx_pos)`` in tx-major order, radar frame."""
    return [(i, j, array.tx_positions[i] + array.rx_positions[j]) for i, j in array.element_order()]


def virtual_positions(array: AntennaArray) -> np.ndarray:
    return (array.tx_positions[:, None, :] + array.rx_positions[None, :, :]).reshape(-1, 3)


def _cos_power(c, k: float):
    cv = ad._val(c)
    pos = cv > 0.0
    base = np.where(pos, cv, 0.0)
    val = base ** k
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(pos, k * np.where(pos, cv, 1.0) ** (k - 1.0), 0.0)
    return ad.custom(val, (c,), lambda g: (g * d,))


def pattern_gain(pattern: RadiationPattern, boresight, direction):
    """Element gain toward ``direction`` (unit vectors, last axis of size 3)."""
    if pattern.kind == "isotropic":
        shape = ad._val(direction).shape[:-1]
        return Var(np.ones(shape))
    b = np.asarray(boresight, float)
    d = direction if isinstance(direction, Var) else Var(direction)
    return _cos_power(ad.dot(d, b), pattern.exponent)


def _awr1843(pattern):
    lam = C0 / 77e9
    tx = [[0.0, 0.0, 0.0], [2 * lam, 0.0, 0.0], [4 * lam, 0.0, 0.0]]
    rx = [[k * lam / 2, 2 * lam, 0.0] for k in range(4)]
    chirp = ChirpConfig(f_c=77e9, bandwidth=4e9, duration=40e-6, n_samples=512, sample_rate=12.8e6)
    return AntennaArray(tx, rx, pattern), chirp


def _p2go24(pattern):
    lam = C0 / 24e9
    tx = [[0.0, lam, 0.0]]
    rx = [[0.0, 0.0, 0.0], [lam / 2, 0.0, 0.0]]
    chirp = ChirpConfig(f_c=24e9, bandwidth=200e6, duration=200e-6, n_samples=256, sample_rate=1.28e6)
    return AntennaArray(tx, rx, pattern), chirp


def _vtrigb(pattern):
    lam = C0 / 65.5e9
    tx = [[-lam, k * lam / 2, 0.0] for k in range(20)]
    rx = [[k * lam / 2, -lam, 0.0] for k in range(20)]
    chirp = ChirpConfig(f_c=65.5e9, bandwidth=7e9, duration=100e-6, n_samples=512, sample_rate=5.12e6)
    return AntennaArray(tx, rx, pattern), chirp


PRESETS = {"awr1843": _awr1843, "p2go24": _p2go24, "vtrigb": _vtrigb}


def preset(name: str, pattern: RadiationPattern | None = None) -> tuple[AntennaArray, ChirpConfig]:
    if name not in PRESETS:
        raise KeyError(f"unknown radar preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name](pattern or RadiationPattern())


def grid_layout(array: AntennaArray, tol: float = 1e-6):
    """Map virtual elements onto an (azimuth, elevation) integer grid.

    Returns ``(ix, iy, n_x, n_y, pitch_x, pitch_y)``; raises ``ValueError``
    listing the positions when the aperture is not a regular grid.
    """
    pos = virtual_positions(array)
    out = []
    for axis in (0, 1):
        c = pos[:, axis] - pos[:, axis].min()
        vals = np.unique(np.round(c / tol).astype(np.int64)) * tol
        if len(vals) == 1:
            out.append((np.zeros(len(pos), np.int64), 1, 0.0))
            continue
        pitch = float(np.min(np.diff(vals)))
        pitch = float(c.max() / np.round(c.max() / pitch))  # refine against the full span
        idx = np.round(c / pitch)
        if np.max(np.abs(idx * pitch - c)) > 1e-3 * pitch:
            raise ValueError(f"virtual array is not grid-mappable along axis {axis}: {pos.tolist()}")
        idx = idx.astype(np.int64)
        out.append((idx, int(idx.max()) + 1, pitch))
    (ix, nx, px), (iy, ny, py) = out
    cells = ix * ny + iy
    if len(np.unique(cells)) != len(cells):
        raise ValueError(f"virtual array has coincident elements: {pos.tolist()}")
    return ix, iy, nx, ny, px, py
