"""Range/azimuth/elevation power volumes from IF frames, CFAR point clouds, registration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import adgraph as ad
from .adgraph import DiffComplex, Var
from .antenna import AntennaArray, grid_layout
from .geometry.mesh import TriangleMesh
from .geometry.transform import RigidParam
from .ifsignal import C0, ChirpConfig, IFFrame


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArrayLayout:
    """Virtual elements on an integer (azimuth, elevation) grid, plus the radar pose."""

    ix: tuple
    iy: tuple
    n_x: int
    n_y: int
    pitch_x: float
    pitch_y: float
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    position: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, array: AntennaArray) -> "ArrayLayout":
        ix, iy, nx, ny, px, py = grid_layout(array)
        return cls(tuple(int(i) for i in ix), tuple(int(i) for i in iy), nx, ny, px, py,
                   tuple(map(tuple, array.rotation.tolist())), tuple(array.position.tolist()))

    def to_dict(self) -> dict:
        return {"ix": list(self.ix), "iy": list(self.iy), "n_x": self.n_x, "n_y": self.n_y,
                "pitch_x": self.pitch_x, "pitch_y": self.pitch_y,
                "rotation": [list(r) for r in self.rotation], "position": list(self.position)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayLayout":
        return cls(tuple(d["ix"]), tuple(d["iy"]), int(d["n_x"]), int(d["n_y"]), float(d["pitch_x"]),
                   float(d["pitch_y"]), tuple(map(tuple, d.get("rotation", np.eye(3).tolist()))),
                   tuple(d.get("position", (0.0, 0.0, 0.0))))


@dataclass
class SpatialImage:
    volume: Var  # (n_range, n_az, n_el) power
    range_axis: np.ndarray  # meters per range bin (negative beyond Nyquist)
    u_az: np.ndarray  # direction cosine along the array x axis per azimuth bin
    u_el: np.ndarray  # direction cosine along the array y axis per elevation bin
    layout: ArrayLayout | None = None

    @property
    def shape(self):
        return self.volume.shape

    @property
    def data(self) -> np.ndarray:
        return self.volume.value

    def peak(self) -> tuple:
        return np.unravel_index(int(np.argmax(self.data)), self.shape)


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 4): x, y, z, intensity
    source: str = "extracted"
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def n_clusters(self) -> int:
        return int(len(np.unique(self.labels))) if len(self.labels) else 0

    def cluster_centroids(self) -> np.ndarray:
        out = []
        for k in np.unique(self.labels):
            m = self.labels == k
            w = self.intensity[m]
            out.append((self.xyz[m] * w[:, None]).sum(axis=0) / w.sum())
        return np.asarray(out).reshape(-1, 3)


# ------------------------------------------------------------------- FFT node


def fft_axis(z: DiffComplex, n: int, axis: int, shift: bool = False) -> DiffComplex:
    """Zero-padded DFT of length ``n`` along ``axis`` as a tape operation.

    The adjoint of ``y = F pad(x)`` is ``crop(n * ifft(g))``.
    """
    x = z.value
    m = x.shape[axis]
    if n < m:
        raise ValueError(f"FFT length {n} shorter than axis length {m}")
    y = np.fft.fft(x, n=n, axis=axis)
    if shift:
        y = np.fft.fftshift(y, axes=axis)

    def adjoint(gc):
        if shift:
            gc = np.fft.ifftshift(gc, axes=axis)
        xb = np.fft.ifft(gc, axis=axis) * n
        return np.take(xb, np.arange(m), axis=axis)

    def vjp_re(g):
        xb = adjoint(g.astype(complex))
        return xb.real, xb.imag

    def vjp_im(g):
        xb = adjoint(1j * g)
        return xb.real, xb.imag

    return DiffComplex(ad.custom(y.real, (z.re, z.im), vjp_re), ad.custom(y.imag, (z.re, z.im), vjp_im))


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "rect" or n < 4:
        return np.ones(n)
    if kind == "hann":
        return np.hanning(n)
    raise ValueError(f"unknown window {kind!r}")


def default_dims(chirp: ChirpConfig, layout: ArrayLayout, pad: int = 2) -> tuple[int, int, int]:
    return (pad * chirp.n_samples, pad * layout.n_x if layout.n_x > 1 else 1,
            pad * layout.n_y if layout.n_y > 1 else 1)


def spatial_image(frame: IFFrame, layout: ArrayLayout, dims=None, window: str = "hann") -> SpatialImage:
    """Windowed, zero-padded 3D DFT (range, azimuth, elevation) followed by ``|.|^2``."""
    chirp = frame.chirp
    e, k = frame.shape
    if e != len(layout.ix):
        raise ValueError(f"frame has {e} elements, layout describes {len(layout.ix)}")
    dims = tuple(dims) if dims is not None else default_dims(chirp, layout)
    n_r, n_az, n_el = (int(d) for d in dims)
    if n_r < k or n_az < layout.n_x or n_el < layout.n_y:
        raise ValueError(f"dims {dims} smaller than the data ({k}, {layout.n_x}, {layout.n_y})")
    z = frame.samples * _window(window, k)[None, :]
    zr = fft_axis(z, n_r, axis=1)  # (E, n_r)
    cells = np.asarray(layout.ix) * layout.n_y + np.asarray(layout.iy)
    grid = ad.csegment_sum(zr, cells, layout.n_x * layout.n_y).reshape(layout.n_x, layout.n_y, n_r)
    wa = _window(window, layout.n_x)[:, None, None]
    we = _window(window, layout.n_y)[None, :, None]
    grid = grid * (wa * we)
    if n_az > 1 or layout.n_x > 1:
        grid = fft_axis(grid, n_az, axis=0, shift=True)
    if n_el > 1 or layout.n_y > 1:
        grid = fft_axis(grid, n_el, axis=1, shift=True)
    power = ad.transpose(grid.abs2(), (2, 0, 1))
    return SpatialImage(power, range_axis(chirp, n_r), _direction_axis(n_az, layout.pitch_x, chirp),
                        _direction_axis(n_el, layout.pitch_y, chirp), layout)


def range_axis(chirp: ChirpConfig, n_r: int) -> np.ndarray:
    beat = np.fft.fftfreq(n_r, d=1.0 / chirp.sample_rate)
    return beat * C0 / (2.0 * chirp.slope)


def _direction_axis(n: int, pitch: float, chirp: ChirpConfig) -> np.ndarray:
    if n == 1 or pitch == 0.0:
        return np.zeros(n)
    # element phase exp(-j 2 pi u x / lambda) peaks at spatial frequency -u pitch / lambda
    return -np.fft.fftshift(np.fft.fftfreq(n)) * chirp.wavelength / pitch


def voxel_to_point(image: SpatialImage, idx) -> np.ndarray:
    """World coordinates of voxel centres ``idx`` = (range, az, el) index arrays."""
    r = image.range_axis[idx[0]]
    ux = image.u_az[idx[1]]
    uy = image.u_el[idx[2]]
    uz = np.sqrt(np.clip(1.0 - ux ** 2 - uy ** 2, 0.0, None))
    local = r[:, None] * np.stack([ux, uy, uz], axis=1)
    lay = image.layout
    if lay is None:
        return local
    return local @ np.asarray(lay.rotation).T + np.asarray(lay.position)


# ---------------------------------------------------------------- detection


@dataclass(frozen=True)
class CFARConfig:
    train: int = 8
    guard: int = 2
    scale: float = 4.0  # amplitude ratio; the power threshold is scale**2
    floor_db: float = 25.0  # ignore cells this far below the volume peak
    min_range: float = 0.1


def _cfar_noise(p: np.ndarray, train: int, guard: int) -> np.ndarray:
    """Smallest-of the leading/lagging training-cell means along axis 0."""
    n = p.shape[0]
    c = np.concatenate([np.zeros((1,) + p.shape[1:]), np.cumsum(p, axis=0)], axis=0)

    def window_mean(lo, hi):
        lo = np.clip(lo, 0, n)
        hi = np.clip(hi, 0, n)
        cnt = (hi - lo).astype(float)
        s = c[hi] - c[lo]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(cnt[:, None, None] > 0, s / np.maximum(cnt, 1)[:, None, None], np.inf)

    i = np.arange(n)
    lead = window_mean(i - guard - train, i - guard)
    lag = window_mean(i + guard + 1, i + guard + 1 + train)
    return np.minimum(lead, lag)


def extract_pointcloud(image: SpatialImage, cfar: CFARConfig | None = None) -> PointCloud:
    """Smallest-of cell-averaging CFAR along range, per angular bin; clusters by connectivity."""
    cfar = cfar or CFARConfig()
    p = np.asarray(image.data, float)
    valid = (image.range_axis > cfar.min_range)
    peak = float(p[valid].max()) if valid.any() and p.size else 0.0
    if peak <= 0.0:
        return PointCloud(np.zeros((0, 4)), labels=np.zeros(0, np.int64))
    noise = _cfar_noise(p, cfar.train, cfar.guard)
    det = (p > cfar.scale ** 2 * noise) & (p >= peak * 10.0 ** (-cfar.floor_db / 10.0))
    det &= valid[:, None, None]
    labels, n = ndimage.label(det, structure=np.ones((3, 3, 3), bool))
    idx = np.nonzero(det)
    if not len(idx[0]):
        return PointCloud(np.zeros((0, 4)), labels=np.zeros(0, np.int64))
    xyz = voxel_to_point(image, idx)
    pts = np.column_stack([xyz, p[idx]])
    return PointCloud(pts, "extracted", labels[idx].astype(np.int64) - 1)


def register_init(cloud: PointCloud, template: TriangleMesh, scale_bounds=(0.5, 2.0)) -> RigidParam:
    """Translation and scale placing the template over the cloud; rotation is identity."""
    if len(cloud) == 0:
        raise InitializationError("cannot register against an empty point cloud")
    w = cloud.intensity
    c_cloud = (cloud.xyz * w[:, None]).sum(axis=0) / w.sum()
    c_tmpl = template.vertices.mean(axis=0)
    r_cloud = float(np.max(np.linalg.norm(cloud.xyz - c_cloud, axis=1)))
    r_tmpl = float(np.max(np.linalg.norm(template.vertices - c_tmpl, axis=1)))
    s = float(np.clip(r_cloud / r_tmpl if r_tmpl > 0 else 1.0, *scale_bounds))
    return RigidParam(c_cloud - s * c_tmpl, np.zeros(3), s)


# --------------------------------------------------------------------- I/O


def save_volume(image: SpatialImage, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    raw, meta = stem.with_suffix(".f32"), stem.with_suffix(".json")
    raw.write_bytes(np.ascontiguousarray(image.data, dtype="<f4").tobytes())
    meta.write_text(json.dumps({
        "format": "float32-le", "layout": "range-major (range, azimuth, elevation)",
        "shape": list(image.shape), "range_m": image.range_axis.tolist(),
        "u_azimuth": image.u_az.tolist(), "u_elevation": image.u_el.tolist(),
    }, indent=2, sort_keys=True) + "\n")
    return raw, meta


def load_volume(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    vol = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4").reshape(meta["shape"])
    return vol.astype(float), meta


def save_pointcloud(cloud: PointCloud, path) -> Path:
    path = Path(path)
    lines = ["x,y,z,intensity"] + [",".join(f"{v:.9g}" for v in row) for row in cloud.points]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_pointcloud(path) -> PointCloud:
    path = Path(path)
    rows = path.read_text().strip().splitlines()
    if not rows or rows[0].replace(" ", "") != "x,y,z,intensity":
        raise ValueError(f"{path}: expected header 'x,y,z,intensity'")
    pts = np.array([[float(v) for v in r.split(",")] for r in rows[1:] if r.strip()]).reshape(-1, 4)
    return PointCloud(pts, "measured", np.zeros(len(pts), np.int64))
