"""FMCW chirp description and complex IF (beat) signal synthesis.

Each propagation path contributes a tone

    S(t) = A * exp(2 pi j (mu t tau + f_c tau))

to its virtual element. The default synthesis records one fused tape node
whose adjoint uses the closed-form partials in tau and A; ``mode="generic"``
composes the same expression from elementary tape ops and serves as the
reference for it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import adgraph as ad
from ._accel import njit, resolve
from .adgraph import DiffComplex, Var

C0 = 299_792_458.0


class ChirpError(ValueError):
    """Invalid chirp setup; ``field`` names the offending setting."""

    def __init__(self, msg: str, field: str):
        super().__init__(msg)
        self.field = field


class FrameFormatError(ValueError):
    pass


class OutOfRangePath(ValueError):
    pass


@dataclass(frozen=True)
class ChirpConfig:
    f_c: float
    bandwidth: float
    duration: float
    n_samples: int = 256
    sample_rate: float = 6.4e6

    @property
    def slope(self) -> float:
        return self.bandwidth / self.duration

    @property
    def sample_times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sample_rate

    @property
    def wavelength(self) -> float:
        return C0 / self.f_c

    @property
    def range_resolution(self) -> float:
        return C0 / (2.0 * self.bandwidth)

    @property
    def range_bin(self) -> float:
        """Range spacing of an unpadded FFT over the sampled window."""
        return C0 * self.sample_rate / (2.0 * self.slope * self.n_samples)

    @property
    def max_beat(self) -> float:
        return 0.5 * self.sample_rate

    @property
    def max_range(self) -> float:
        return self.max_beat * C0 / (2.0 * self.slope)

    def validate(self, max_range: float | None = None) -> "ChirpConfig":
        for name in ("f_c", "bandwidth", "duration", "sample_rate"):
            if not (np.isfinite(getattr(self, name)) and getattr(self, name) > 0):
                raise ChirpError(f"{name} must be positive and finite", name)
        if int(self.n_samples) < 2:
            raise ChirpError("n_samples must be >= 2", "n_samples")
        if self.n_samples / self.sample_rate > self.duration * (1 + 1e-12):
            raise ChirpError(
                f"sampling window {self.n_samples / self.sample_rate:.3e} s exceeds "
                f"chirp_duration {self.duration:.3e} s", "chirp_duration")
        if max_range is not None:
            tof = 2.0 * max_range / C0
            if tof >= self.duration:
                raise ChirpError(f"round-trip delay {tof:.3e} s to {max_range:.2f} m is not below "
                                 f"chirp_duration {self.duration:.3e} s", "chirp_duration")
            if self.slope * tof >= self.max_beat:
                raise ChirpError(
                    f"beat {self.slope * tof:.4g} Hz at {max_range:.2f} m aliases: "
                    f"sample_rate/2 is {self.max_beat:.4g} Hz", "sample_rate")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chirp_duration"] = d.pop("duration")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChirpConfig":
        d = dict(d)
        if "chirp_duration" in d:
            d["duration"] = d.pop("chirp_duration")
        return cls(float(d["f_c"]), float(d["bandwidth"]), float(d["duration"]),
                   int(d.get("n_samples", 256)), float(d.get("sample_rate", 6.4e6)))


@dataclass
class PathBatch:
    """Flat path list: delay ``tof`` (s), complex amplitude, and virtual element index."""

    tof: Var
    amplitude: DiffComplex
    element: np.ndarray
    n_elements: int

    def __len__(self):
        return len(self.element)

    @classmethod
    def empty(cls, n_elements: int) -> "PathBatch":
        z = Var(np.zeros(0))
        return cls(z, DiffComplex(z, z), np.zeros(0, np.int64), n_elements)

    @classmethod
    def from_arrays(cls, tof, amplitude, element, n_elements: int) -> "PathBatch":
        amp = amplitude if isinstance(amplitude, DiffComplex) else DiffComplex.const(amplitude)
        tof = tof if isinstance(tof, Var) else Var(tof)
        return cls(tof, amp, np.asarray(element, np.int64), int(n_elements))

    def concat(self, other: "PathBatch") -> "PathBatch":
        if other.n_elements != self.n_elements:
            raise ValueError("path batches address different arrays")
        return PathBatch(ad.concatenate([self.tof, other.tof]),
                         DiffComplex(ad.concatenate([self.amplitude.re, other.amplitude.re]),
                                     ad.concatenate([self.amplitude.im, other.amplitude.im])),
                         np.concatenate([self.element, other.element]), self.n_elements)


@dataclass
class IFFrame:
    """``samples`` is (n_elements, n_samples), rows in tx-major element order."""

    samples: DiffComplex
    chirp: ChirpConfig
    element_order: list

    @property
    def shape(self):
        return self.samples.shape

    @property
    def data(self) -> np.ndarray:
        return self.samples.value

    @classmethod
    def from_array(cls, z, chirp, element_order) -> "IFFrame":
        return cls(DiffComplex.const(z), chirp, [tuple(e) for e in element_order])

    def scaled(self, a: float) -> "IFFrame":
        return IFFrame(self.samples * a, self.chirp, self.element_order)


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _synth_nb(tau, a_re, a_im, elem, t, fc, mu, out_re, out_im):
    two_pi = 2.0 * np.pi
    for i in range(tau.shape[0]):
        e = elem[i]
        for k in range(t.shape[0]):
            ph = two_pi * (mu * t[k] + fc) * tau[i]
            c = np.cos(ph)
            s = np.sin(ph)
            out_re[e, k] += a_re[i] * c - a_im[i] * s
            out_im[e, k] += a_re[i] * s + a_im[i] * c


@njit(cache=True)
def _synth_vjp_nb(tau, a_re, a_im, elem, t, fc, mu, g_re, g_im, d_tau, d_re, d_im):
    two_pi = 2.0 * np.pi
    for i in range(tau.shape[0]):
        e = elem[i]
        acc_t = 0.0
        acc_r = 0.0
        acc_i = 0.0
        for k in range(t.shape[0]):
            w = two_pi * (mu * t[k] + fc)
            ph = w * tau[i]
            c = np.cos(ph)
            s = np.sin(ph)
            gr = g_re[e, k]
            gi = g_im[e, k]
            # dL/dA = sum G conj(E);  dL/dtau = Re(sum conj(G) * j w A E)
            acc_r += gr * c + gi * s
            acc_i += gi * c - gr * s
            ae_re = a_re[i] * c - a_im[i] * s
            ae_im = a_re[i] * s + a_im[i] * c
            acc_t += w * (gi * ae_re - gr * ae_im)
        d_tau[i] = acc_t
        d_re[i] = acc_r
        d_im[i] = acc_i


def _phasors(tau, t, chirp):
    w = 2.0 * np.pi * (chirp.slope * t + chirp.f_c)
    return np.exp(1j * np.outer(tau, w)), w


def _chunks(n_paths: int, n_samples: int, budget: int = 1 << 21):
    step = max(1, budget // max(n_samples, 1))
    for s in range(0, n_paths, step):
        yield slice(s, min(n_paths, s + step))


def _synth_np(tau, amp, elem, t, chirp, n_el):
    out = np.zeros((n_el, len(t)), complex)
    for sl in _chunks(len(tau), len(t)):
        e, _ = _phasors(tau[sl], t, chirp)
        contrib = amp[sl, None] * e
        order = np.argsort(elem[sl], kind="stable")
        el = elem[sl][order]
        bounds = np.flatnonzero(np.r_[True, el[1:] != el[:-1]])
        out[el[bounds]] += np.add.reduceat(contrib[order], bounds, axis=0)
    return out


def _synth_vjp_np(tau, amp, elem, t, chirp, g):
    d_tau = np.zeros(len(tau))
    d_amp = np.zeros(len(tau), complex)
    for sl in _chunks(len(tau), len(t)):
        e, w = _phasors(tau[sl], t, chirp)
        gp = g[elem[sl]]
        d_amp[sl] = np.sum(gp * np.conj(e), axis=1)
        d_tau[sl] = np.real(np.sum(np.conj(gp) * 1j * w * amp[sl, None] * e, axis=1))
    return d_tau, d_amp


def _check_tof(tau, chirp):
    bad = np.flatnonzero(~(tau < chirp.duration) | ~np.isfinite(tau))
    if bad.size:
        i = int(bad[0])
        raise OutOfRangePath(f"path {i} has tof {tau[i]:.6e} s, not below chirp_duration "
                             f"{chirp.duration:.6e} s")


def synthesize(paths: PathBatch, chirp: ChirpConfig, element_order=None, mode: str = "fused",
               backend: str | None = None) -> IFFrame:
    n_el = paths.n_elements
    element_order = element_order if element_order is not None else [(e, 0) for e in range(n_el)]
    t = chirp.sample_times
    tau = paths.tof.value.reshape(-1)
    _check_tof(tau, chirp)
    if len(tau) == 0:
        return IFFrame(DiffComplex.const(np.zeros((n_el, len(t)), complex)), chirp, element_order)
    if mode == "generic":
        return IFFrame(_synth_generic(paths, chirp), chirp, element_order)
    if mode != "fused":
        raise ValueError(f"unknown synthesis mode {mode!r}")
    amp = paths.amplitude.value.reshape(-1)
    elem = paths.element
    use_nb = resolve(backend) == "numba"
    if use_nb:
        re = np.zeros((n_el, len(t)))
        im = np.zeros((n_el, len(t)))
        _synth_nb(tau, amp.real.copy(), amp.imag.copy(), elem, t, chirp.f_c, chirp.slope, re, im)
        out = re + 1j * im
    else:
        out = _synth_np(tau, amp, elem, t, chirp, n_el)

    def partials(g_re, g_im):
        if use_nb:
            d_tau, d_re, d_im = np.empty(len(tau)), np.empty(len(tau)), np.empty(len(tau))
            _synth_vjp_nb(tau, amp.real.copy(), amp.imag.copy(), elem, t, chirp.f_c, chirp.slope,
                          np.ascontiguousarray(g_re), np.ascontiguousarray(g_im), d_tau, d_re, d_im)
            return d_tau, d_re + 1j * d_im
        return _synth_vjp_np(tau, amp, elem, t, chirp, g_re + 1j * g_im)

    inputs = (paths.tof, paths.amplitude.re, paths.amplitude.im)
    zeros = np.zeros((n_el, len(t)))

    # Re and Im outputs are separate tape nodes; each adjoint pass sees one of them.
    def vjp_re(g):
        d_tau, d_amp = partials(g, zeros)
        return d_tau.reshape(paths.tof.shape), d_amp.real, d_amp.imag

    def vjp_im(g):
        d_tau, d_amp = partials(zeros, g)
        return d_tau.reshape(paths.tof.shape), d_amp.real, d_amp.imag

    samples = DiffComplex(ad.custom(out.real, inputs, vjp_re), ad.custom(out.imag, inputs, vjp_im))
    return IFFrame(samples, chirp, element_order)


def _synth_generic(paths: PathBatch, chirp: ChirpConfig) -> DiffComplex:
    t = chirp.sample_times
    w = 2.0 * np.pi * (chirp.slope * t + chirp.f_c)
    tau = ad.reshape(paths.tof, (-1, 1))
    phase = tau * w[None, :]
    e = ad.cexp(DiffComplex(Var(np.zeros(phase.shape)), phase))
    a = paths.amplitude.reshape(-1, 1)
    return ad.csegment_sum(a * e, paths.element, paths.n_elements)


def analytic_partials(paths: PathBatch, chirp: ChirpConfig, t):
    """Closed-form ``(dS/dtof_i, dS/dA_i)`` at sample time(s) ``t``.

    Returns complex arrays of shape (n_paths,) for scalar ``t`` or
    (n_paths, len(t)) otherwise.
    """
    tau = paths.tof.value.reshape(-1)
    _check_tof(tau, chirp)
    amp = paths.amplitude.value.reshape(-1)
    t_arr = np.atleast_1d(np.asarray(t, float))
    e, w = _phasors(tau, t_arr, chirp)
    d_tau = 1j * w[None, :] * amp[:, None] * e
    if np.ndim(t) == 0:
        return d_tau[:, 0], e[:, 0]
    return d_tau, e


def add_noise(frame: IFFrame, snr_db: float, seed: int) -> IFFrame:
    """Circular complex Gaussian noise at ``snr_db`` below the frame's mean power.

    Noise enters as data: gradients pass through the signal unchanged.
    ``snr_db = inf`` returns the input frame.
    """
    if np.isinf(snr_db) and snr_db > 0:
        return frame
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    z = frame.data
    p_sig = float(np.mean(np.abs(z) ** 2))
    p_noise = p_sig / 10.0 ** (snr_db / 10.0)
    rng = np.random.Generator(np.random.Philox(seed))
    n = rng.standard_normal(z.shape + (2,)) * np.sqrt(p_noise / 2.0)
    return IFFrame(frame.samples + (n[..., 0] + 1j * n[..., 1]), frame.chirp, frame.element_order)


# ---------------------------------------------------------------- file I/O


def save_frame(frame: IFFrame, stem, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.iq`` (float32 LE, interleaved re/im, element-major) and ``<stem>.json``.

    ``extra`` entries (e.g. the virtual-array layout) are stored in the sidecar.
    """
    stem = Path(stem)
    z = frame.data
    inter = np.empty(z.shape + (2,), dtype="<f4")
    inter[..., 0] = z.real
    inter[..., 1] = z.imag
    iq, meta = stem.with_suffix(".iq"), stem.with_suffix(".json")
    iq.write_bytes(inter.tobytes())
    doc = dict(extra or {})
    doc.update({
        "format": "iq-float32-le-interleaved",
        "shape": list(z.shape),
        "layout": "element-major, sample-minor",
        "chirp": frame.chirp.to_dict(),
        "element_order": [list(map(int, e)) for e in frame.element_order],
    })
    meta.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return iq, meta


def read_frame_meta(stem) -> dict:
    try:
        return json.loads(Path(stem).with_suffix(".json").read_text())
    except (OSError, ValueError) as exc:
        raise FrameFormatError(f"cannot read observation sidecar {stem}: {exc}") from exc


def load_frame(stem) -> IFFrame:
    stem = Path(stem)
    iq, meta = stem.with_suffix(".iq"), stem.with_suffix(".json")
    try:
        info = json.loads(meta.read_text())
        raw = np.frombuffer(iq.read_bytes(), dtype="<f4")
    except (OSError, ValueError) as exc:
        raise FrameFormatError(f"cannot read observation {stem}: {exc}") from exc
    try:
        shape = tuple(int(s) for s in info["shape"])
        chirp = ChirpConfig.from_dict(info["chirp"])
        order = [tuple(e) for e in info["element_order"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FrameFormatError(f"{meta}: malformed sidecar ({exc})") from exc
    if raw.size != 2 * shape[0] * shape[1]:
        raise FrameFormatError(f"{iq}: sample count mismatch: expected {2 * shape[0] * shape[1]} "
                               f"floats for shape {shape}, found {raw.size}")
    if shape[1] != chirp.n_samples or len(order) != shape[0]:
        raise FrameFormatError(f"{meta}: shape {shape} disagrees with chirp/element order")
    z = raw.reshape(shape + (2,)).astype(float)
    return IFFrame.from_array(z[..., 0] + 1j * z[..., 1], chirp, order)
