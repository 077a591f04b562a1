import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfd import adgraph as ad
from rfd.adgraph import DiffComplex, Tape
from rfd.ifsignal import (ChirpConfig, ChirpError, FrameFormatError, IFFrame, OutOfRangePath, PathBatch,
                          add_noise, analytic_partials, load_frame, read_frame_meta, save_frame, synthesize)

from oracles import C0, if_samples

CHIRP = ChirpConfig(77e9, 4e9, 40e-6, 256, 6.4e6)
BACKENDS = ["numpy", "numba"]


def batch(tof, amp, elem, n_el):
    return PathBatch.from_arrays(np.asarray(tof, float), np.asarray(amp, complex), elem, n_el)


def test_chirp_derived_quantities():
    assert CHIRP.slope == pytest.approx(1e14, rel=1e-15)
    assert CHIRP.slope * CHIRP.duration == pytest.approx(CHIRP.bandwidth, rel=1e-15)
    assert CHIRP.range_resolution == pytest.approx(0.0375, abs=5e-5)  # c/(2B), c slightly below 3e8
    assert CHIRP.max_beat == 3.2e6


@pytest.mark.parametrize("kwargs, field", [
    (dict(f_c=-1.0), "f_c"),
    (dict(bandwidth=0.0), "bandwidth"),
    (dict(n_samples=1), "n_samples"),
    (dict(sample_rate=1e6), "chirp_duration"),  # 256 samples at 1 MHz outlast 40 us
])
def test_chirp_validation(kwargs, field):
    d = dict(f_c=77e9, bandwidth=4e9, duration=40e-6, n_samples=256, sample_rate=6.4e6)
    d.update(kwargs)
    with pytest.raises(ChirpError) as err:
        ChirpConfig(**d).validate()
    assert err.value.field == field


def test_chirp_rejects_aliasing_range():
    CHIRP.validate(max_range=4.0)
    with pytest.raises(ChirpError) as err:
        CHIRP.validate(max_range=10.0)
    assert err.value.field == "sample_rate"


def test_chirp_dict_roundtrip():
    d = CHIRP.to_dict()
    assert "chirp_duration" in d and "duration" not in d
    assert ChirpConfig.from_dict(d) == CHIRP


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_path_is_pure_tone(backend):
    tau = 2 * 5.0 / C0
    z = synthesize(batch([tau], [1.0], [0], 1), CHIRP, backend=backend).data[0]
    t = CHIRP.sample_times
    beat = CHIRP.slope * tau
    assert tau == pytest.approx(33.3564e-9, abs=1e-13)
    assert beat == pytest.approx(3.33564e6, rel=1e-5)
    expected = np.exp(2j * np.pi * (beat * t + CHIRP.f_c * tau))
    np.testing.assert_allclose(z, expected, atol=1e-9)
    # instantaneous frequency from the sample-to-sample phase step
    step = np.angle(z[1:] * np.conj(z[:-1])) * CHIRP.sample_rate / (2 * np.pi)
    np.testing.assert_allclose(step, beat - CHIRP.sample_rate, rtol=1e-6)  # 3.34 MHz > fs/2 folds


def test_beat_below_nyquist_peaks_at_range_bin():
    tau = 2 * 3.0 / C0
    z = synthesize(batch([tau], [1.0], [0], 1), CHIRP).data[0]
    k = int(np.argmax(np.abs(np.fft.fft(z))))
    r = k * CHIRP.range_bin
    assert abs(r - 3.0) <= CHIRP.range_bin


@pytest.mark.parametrize("mode", ["fused", "generic"])
def test_zero_paths_give_zero_frame(mode):
    f = synthesize(PathBatch.empty(12), CHIRP, mode=mode)
    assert f.shape == (12, 256) and not np.any(f.data)


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_loop_oracle(backend, rng):
    n_el, n = 4, 30
    tof = rng.uniform(1e-9, 60e-9, n)
    amp = rng.normal(size=n) + 1j * rng.normal(size=n)
    elem = rng.integers(0, n_el, n)
    ch = ChirpConfig(77e9, 4e9, 40e-6, 32, 6.4e6)
    z = synthesize(batch(tof, amp, elem, n_el), ch, backend=backend).data
    ref = if_samples(tof, amp, elem, n_el, ch.f_c, ch.slope, ch.sample_times)
    np.testing.assert_allclose(z, ref, atol=1e-9)


def test_out_of_range_path_names_index():
    with pytest.raises(OutOfRangePath, match="path 1"):
        synthesize(batch([1e-9, 50e-6], [1, 1], [0, 0], 1), CHIRP)


def test_partials_at_t0():
    tau = np.array([13.1e-9, 40.7e-9])
    p = batch(tau, [1.0, 1.0], [0, 0], 1)
    d_tau, d_amp = analytic_partials(p, CHIRP, 0.0)
    np.testing.assert_allclose(d_amp, np.exp(2j * np.pi * CHIRP.f_c * tau), atol=1e-12)
    np.testing.assert_allclose(np.abs(d_tau), 2 * np.pi * CHIRP.f_c, rtol=1e-12)


def _generic_partials(tau0, amp0, t):
    # AD through cexp, one scalar sample per path
    w = 2 * np.pi * (CHIRP.slope * t + CHIRP.f_c)
    out = []
    for part in ("re", "im"):
        with Tape():
            tau = ad.register_parameter(tau0)
            a = ad.register_parameter(np.array([amp0.real, amp0.imag]))
            s = DiffComplex(a[0], a[1]) * ad.cexp(DiffComplex(ad.constant(0.0), tau * w))
            g = ad.backward(getattr(s, part))
            out.append((float(g[tau]), g[a]))
    (gt_re, ga_re), (gt_im, ga_im) = out
    return complex(gt_re, gt_im), complex(ga_re[0], ga_im[0])


@given(tau=st.floats(1e-9, 39e-6), ar=st.floats(-2, 2), ai=st.floats(-2, 2), k=st.integers(0, 255))
def test_fused_partials_match_generic(tau, ar, ai, k):
    t = k / CHIRP.sample_rate
    amp = complex(ar, ai)
    d_tau, d_amp = analytic_partials(batch([tau], [amp], [0], 1), CHIRP, t)
    g_tau, g_amp = _generic_partials(tau, amp, t)
    assert abs(d_tau[0] - g_tau) <= 1e-12 * max(abs(g_tau), 1e-300) + 1e-300
    assert abs(d_amp[0] - g_amp) <= 1e-12 * abs(g_amp)


def _loss_grads(tof0, amp0, elem, n_el, target, mode, backend=None):
    with Tape():
        tof = ad.register_parameter(tof0)
        a = ad.register_parameter(np.stack([amp0.real, amp0.imag]))
        p = PathBatch(tof, DiffComplex(a[0], a[1]), elem, n_el)
        s = synthesize(p, CHIRP, mode=mode, backend=backend).samples
        loss = ad.sum((s - DiffComplex.const(target)).abs2())
        g = ad.backward(loss)
        return g[tof], g[a]


@pytest.mark.parametrize("backend", BACKENDS)
def test_fused_loss_gradient_matches_generic(backend, rng):
    n_el, n = 3, 20
    tof = rng.uniform(5e-9, 60e-9, n)
    amp = rng.normal(size=n) + 1j * rng.normal(size=n)
    elem = rng.integers(0, n_el, n)
    target = rng.normal(size=(n_el, 256)) + 1j * rng.normal(size=(n_el, 256))
    gf = _loss_grads(tof, amp, elem, n_el, target, "fused", backend)
    gg = _loss_grads(tof, amp, elem, n_el, target, "generic")
    for a, b in zip(gf, gg):
        assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(b))


def test_linearity(rng):
    n_el = 2
    ta, tb = rng.uniform(1e-9, 50e-9, 5), rng.uniform(1e-9, 50e-9, 7)
    aa, ab = rng.normal(size=5) + 0j, rng.normal(size=7) * 1j
    ea, eb = rng.integers(0, n_el, 5), rng.integers(0, n_el, 7)
    pa, pb = batch(ta, aa, ea, n_el), batch(tb, ab, eb, n_el)
    both = synthesize(pa.concat(pb), CHIRP).data
    np.testing.assert_allclose(both, synthesize(pa, CHIRP).data + synthesize(pb, CHIRP).data, atol=1e-12)


def test_boresight_target_elements_share_phase():
    tau = 2 * 5.0 / C0
    f = synthesize(batch([tau] * 12, [0.3] * 12, np.arange(12), 12), CHIRP).data
    ph = np.angle(f[:, 0] * np.conj(f[0, 0]))
    assert np.max(np.abs(np.degrees(ph))) < 1.0


# --- noise ---------------------------------------------------------------------


def _tone_frame(n_el, n_samples):
    ch = ChirpConfig(77e9, 4e9, 40e-6, n_samples, n_samples / 40e-6)
    t = ch.sample_times
    z = np.tile(np.exp(2j * np.pi * 1e6 * t), (n_el, 1))
    return IFFrame.from_array(z, ch, [(e, 0) for e in range(n_el)])


def test_infinite_snr_is_identity():
    f = _tone_frame(2, 64)
    assert add_noise(f, math.inf, 3) is f
    with pytest.raises(ValueError):
        add_noise(f, math.nan, 3)


def test_zero_db_noise_power():
    f = _tone_frame(100, 1000)  # 1e5 samples
    noisy = add_noise(f, 0.0, 11)
    p_n = np.mean(np.abs(noisy.data - f.data) ** 2)
    p_s = np.mean(np.abs(f.data) ** 2)
    assert abs(p_n / p_s - 1) < 0.05


def test_noise_seeded_and_outside_tape():
    f = _tone_frame(2, 64)
    a, b, c = add_noise(f, 10.0, 5), add_noise(f, 10.0, 5), add_noise(f, 10.0, 6)
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)
    with Tape():
        amp = ad.register_parameter(np.array([1.0, 0.0]))
        p = PathBatch(Var1(20e-9), DiffComplex(amp[0:1], amp[1:2]), np.array([0]), 1)
        clean = synthesize(p, CHIRP)
        noisy = add_noise(clean, 10.0, 1)
        g_noisy = ad.backward(ad.sum(noisy.samples.re))[amp]
        g_clean = ad.backward(ad.sum(clean.samples.re))[amp]
    np.testing.assert_array_equal(g_noisy, g_clean)


def Var1(x):
    return ad.Var(np.array([x]))


# --- file format ---------------------------------------------------------------


def test_frame_roundtrip(tmp_path, rng):
    z = rng.normal(size=(3, 256)) + 1j * rng.normal(size=(3, 256))
    f = IFFrame.from_array(z, CHIRP, [(0, 0), (0, 1), (1, 0)])
    iq, meta = save_frame(f, tmp_path / "obs", extra={"note": 1})
    assert iq.stat().st_size == 3 * 256 * 2 * 4
    raw = np.frombuffer(iq.read_bytes(), "<f4")
    assert raw[0] == np.float32(z[0, 0].real) and raw[1] == np.float32(z[0, 0].imag)
    assert raw[2] == np.float32(z[0, 1].real)
    g = load_frame(tmp_path / "obs")
    np.testing.assert_allclose(g.data, z, rtol=1e-6, atol=1e-6)
    assert g.chirp == CHIRP and g.element_order == f.element_order
    assert read_frame_meta(tmp_path / "obs")["note"] == 1


def test_truncated_frame_rejected(tmp_path):
    f = IFFrame.from_array(np.ones((2, 256), complex), CHIRP, [(0, 0), (0, 1)])
    iq, _ = save_frame(f, tmp_path / "obs")
    iq.write_bytes(iq.read_bytes()[:-8])
    with pytest.raises(FrameFormatError, match="sample count mismatch"):
        load_frame(tmp_path / "obs")
    with pytest.raises(FrameFormatError):
        load_frame(tmp_path / "missing")
