import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfd import adgraph as ad
from rfd import meshes
from rfd.adgraph import Tape
from rfd.antenna import (AntennaArray, RadiationPattern, grid_layout, pattern_gain, preset, virtual_array,
                         virtual_positions)
from rfd.geometry import rotation_matrix, static_scene
from rfd.rfmaterial import lookup
from rfd.tracer import RadarScene, TraceConfig, trace


@pytest.mark.parametrize("name, n_virtual, f_c", [("awr1843", 12, 77e9), ("p2go24", 2, 24e9),
                                                  ("vtrigb", 400, 65.5e9)])
def test_presets(name, n_virtual, f_c):
    arr, chirp = preset(name)
    assert len(virtual_array(arr)) == n_virtual
    assert chirp.f_c == f_c


def test_awr1843_counts_and_bandwidth():
    arr, chirp = preset("awr1843")
    assert (arr.n_tx, arr.n_rx) == (3, 4) and chirp.bandwidth == 4e9
    ix, iy, nx, ny, px, _ = grid_layout(arr)
    assert (nx, ny) == (12, 1) and px == pytest.approx(chirp.wavelength / 2)


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("x-band-9000")


def test_virtual_order_tx_major():
    arr, _ = preset("awr1843")
    va = virtual_array(arr)
    assert [(i, j) for i, j, _ in va] == [(i, j) for i in range(3) for j in range(4)]
    for i, j, p in va:
        np.testing.assert_array_equal(p, arr.tx_positions[i] + arr.rx_positions[j])
    assert [tuple(e) for e in arr.element_order()] == [(i, j) for i, j, _ in va]


def test_array_invariants():
    with pytest.raises(ValueError):
        AntennaArray(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(ValueError):
        AntennaArray([[0, 0, 0]], [[0, 0, 0]])


def test_pattern_examples():
    iso = RadiationPattern("isotropic")
    cos2 = RadiationPattern("cosine_power", 2.0)
    b = np.array([0.0, 0.0, 1.0])
    d60 = np.array([math.sin(math.pi / 3), 0.0, math.cos(math.pi / 3)])
    assert float(pattern_gain(iso, b, np.array([0.0, 1.0, 0.0])).value) == 1.0
    assert float(pattern_gain(cos2, b, d60).value) == pytest.approx(0.25)
    assert float(pattern_gain(cos2, b, np.array([0.0, 0.6, -0.8])).value) == 0.0


@given(st.floats(0.0, math.pi), st.floats(0.0, 2 * math.pi), st.floats(0.0, 6.0))
def test_pattern_in_unit_interval(theta, phi, k):
    d = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    g = float(pattern_gain(RadiationPattern("cosine_power", k), np.array([0, 0, 1.0]), d).value)
    assert 0.0 <= g <= 1.0 + 1e-15
    assert float(pattern_gain(RadiationPattern("cosine_power", k), np.array([0, 0, 1.0]),
                              np.array([0, 0, 1.0])).value) == 1.0


def test_pattern_gradient_matches_fd():
    pat = RadiationPattern("cosine_power", 1.5)
    b = np.array([0.0, 0.0, 1.0])
    d0 = np.array([0.3, 0.2, 0.9])
    with Tape():
        d = ad.register_parameter(d0)
        g = ad.backward(pattern_gain(pat, b, d))[d]
    fd = (max(0, d0[2] + 1e-6) ** 1.5 - max(0, d0[2] - 1e-6) ** 1.5) / 2e-6
    np.testing.assert_allclose(g, [0, 0, fd], rtol=1e-6)


def test_swapped_is_reciprocal_copy():
    arr, _ = preset("awr1843")
    s = arr.swapped(1, 2)
    np.testing.assert_array_equal(s.tx_positions[1], arr.rx_positions[2])
    np.testing.assert_array_equal(s.rx_positions[2], arr.tx_positions[1])


def test_non_grid_array_is_rejected():
    arr = AntennaArray([[0, 0.01, 0]], [[0.0, 0, 0], [0.001, 0, 0], [0.0027, 0, 0]])
    with pytest.raises(ValueError, match="grid"):
        grid_layout(arr)


def test_far_field_phase_matches_plane_wave():
    arr, chirp = preset("awr1843", RadiationPattern("isotropic"))
    lam = chirp.wavelength
    u = np.array([math.sin(0.3), 0.0, math.cos(0.3)])
    target = 200.0 * u
    plate = meshes.plate(0.01)
    # plate facing the radar at the target
    n = -u
    z = np.array([0, 0, -1.0])
    axis = np.cross(z, n)
    ang = math.asin(min(1.0, np.linalg.norm(axis)))
    rot = rotation_matrix(axis / np.linalg.norm(axis) * ang).value
    world = plate.vertices @ rot.T + target
    geo = static_scene([type(plate)(world, plate.triangles)])
    scene = RadarScene(geo, [lookup("metal")])
    with Tape():
        paths = trace(scene, arr, TraceConfig(rays_per_virtual_element=1, max_bounces=1, random_fraction=0.0),
                      chirp.f_c)
    amp = np.zeros(arr.n_virtual, complex)
    np.add.at(amp, paths.element, paths.amplitude.value * np.exp(2j * np.pi * chirp.f_c * paths.tof.value))
    pv = virtual_positions(arr)
    model = np.exp(-2j * np.pi / lam * (pv @ u))
    rel = amp / model
    dphi = np.angle(rel / rel[0])
    assert np.max(np.abs(np.degrees(dphi))) < 1.0
