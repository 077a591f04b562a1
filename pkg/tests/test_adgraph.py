import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfd import adgraph as ad
from rfd.adgraph import DiffComplex, Tape, Var

from oracles import central_difference

finite = st.floats(-3.0, 3.0, allow_nan=False)
positive = st.floats(0.1, 4.0, allow_nan=False)


def grad_of(f, x0):
    with Tape():
        x = ad.register_parameter(x0)
        y = f(x)
        return float(y.value), float(ad.backward(y)[x])


@pytest.mark.parametrize("x0, f, expected", [
    (3.0, lambda x: x * x, 6.0),
    (0.0, ad.exp, 1.0),
    (2.0, lambda x: x * x * x, 12.0),
])
def test_register_parameter_examples(x0, f, expected):
    assert grad_of(f, x0)[1] == pytest.approx(expected, abs=1e-15)


def test_register_parameter_needs_tape():
    with pytest.raises(ad.ConfigurationError):
        ad.register_parameter(1.0)


def test_product_rule():
    with Tape():
        a = ad.register_parameter(2.0)
        b = ad.register_parameter(5.0)
        g = ad.backward(a * b)
    assert float(g[a]) == 5.0 and float(g[b]) == 2.0


def test_unit_phasor_modulus_has_zero_gradient():
    with Tape():
        phi = ad.register_parameter(0.7)
        z = ad.cexp(DiffComplex(Var(0.0), phi))
        g = ad.backward(z.abs2())
    assert abs(float(g[phi])) < 1e-15


def test_real_part_of_phasor_matches_central_difference():
    _, g = grad_of(lambda p: ad.cexp(DiffComplex(Var(0.0), p)).re, 0.3)
    fd = central_difference(math.cos, 0.3, 1e-6)
    assert g == pytest.approx(fd, abs=1e-9)
    assert g == pytest.approx(-0.29552, abs=1e-5)


def test_complex_loss_rejected():
    with Tape():
        x = ad.register_parameter(1.0)
        with pytest.raises(TypeError):
            ad.backward(DiffComplex(x, x))


def test_untouched_parameter_gets_zero():
    with Tape():
        a = ad.register_parameter(1.0)
        b = ad.register_parameter(np.ones(3))
        g = ad.backward(a * 2.0)
    assert float(g[a]) == 2.0
    np.testing.assert_array_equal(g[b], np.zeros(3))


def test_constant_has_no_gradient_path():
    with Tape():
        a = ad.register_parameter(1.5)
        c = ad.constant(4.0)
        g = ad.backward(a * c + ad.stop_gradient(a) * a)
    assert float(g[a]) == pytest.approx(4.0 + 1.5)
    assert not c.requires_grad


def test_parents_precede_children():
    with Tape() as tape:
        x = ad.register_parameter(np.ones(4))
        y = ad.sum(ad.exp(x) * ad.sin(x) + x)
        ad.backward(y)
    for node, parents in enumerate(tape.parents):
        assert all(pid < node for _, pid in parents)


def test_fanout_accumulates_additively():
    # x used four times -> gradient counts each use once
    _, g = grad_of(lambda x: x + x + x * 2.0 + ad.sin(x), 0.4)
    assert g == pytest.approx(4.0 + math.cos(0.4), abs=1e-14)


# --- primitive gradients vs central differences --------------------------------

UNARY = {
    "exp": (ad.exp, np.exp, finite),
    "log": (ad.log, np.log, positive),
    "sqrt": (ad.sqrt, np.sqrt, positive),
    "sin": (ad.sin, np.sin, finite),
    "cos": (ad.cos, np.cos, finite),
    "softplus": (ad.softplus, lambda v: np.logaddexp(0.0, v), finite),
    "power3": (lambda x: x ** 3, lambda v: v ** 3, finite),
    "recip": (lambda x: 1.0 / x, lambda v: 1.0 / v, positive),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(data=st.data())
def test_unary_primitive_matches_fd(name, data):
    f, fn, dom = UNARY[name]
    x0 = data.draw(dom)
    _, g = grad_of(f, x0)
    fd = central_difference(fn, x0, 1e-6)
    assert abs(g - fd) / max(1.0, abs(fd)) < 1e-5


@given(a=finite, b=finite, c=positive)
def test_binary_primitives_match_fd(a, b, c):
    def f(vec):
        x, y, z = vec[0], vec[1], vec[2]
        return x * y - y / z + ad.sqrt(z) * x

    with Tape():
        v = ad.register_parameter(np.array([a, b, c]))
        g = ad.backward(f(v))[v]
    for i in range(3):
        def fi(t, i=i):
            w = np.array([a, b, c], float)
            w[i] = t
            return w[0] * w[1] - w[1] / w[2] + np.sqrt(w[2]) * w[0]
        fd = central_difference(fi, [a, b, c][i], 1e-6)
        assert abs(g[i] - fd) / max(1.0, abs(fd)) < 1e-5


@given(st.lists(finite, min_size=6, max_size=6))
def test_vector_ops_match_fd(vals):
    x0 = np.array(vals).reshape(2, 3)

    def f(x):
        n = ad.normalize(x + 5.0)
        return ad.sum(ad.cross(n, x) * x) + ad.sum(ad.norm(x + 5.0))

    def fnum(x):
        xp = x + 5.0
        n = xp / np.linalg.norm(xp, axis=1, keepdims=True)
        return np.sum(np.cross(n, x) * x) + np.sum(np.linalg.norm(xp, axis=1))

    with Tape():
        x = ad.register_parameter(x0)
        g = ad.backward(f(x))[x]
    for idx in np.ndindex(x0.shape):
        e = np.zeros_like(x0)
        e[idx] = 1e-6
        fd = (fnum(x0 + e) - fnum(x0 - e)) / 2e-6
        assert abs(g[idx] - fd) / max(1.0, abs(fd)) < 1e-5


@given(zr=finite, zi=finite, wr=finite, wi=finite)
def test_complex_chain_rule(zr, zi, wr, wi):
    # d Re(z conj(w)) / d(re z, im z) = (re w, im w)
    with Tape():
        z = ad.register_parameter(np.array([zr, zi]))
        zc = DiffComplex(z[0], z[1])
        w = DiffComplex.const(complex(wr, wi))
        g = ad.backward((zc * w.conj()).re)[z]
    np.testing.assert_allclose(g, [wr, wi], atol=1e-12)


@given(zr=st.floats(0.2, 3.0), zi=st.floats(-3.0, 3.0))
def test_csqrt_gradient_matches_fd(zr, zi):
    def num(vec):
        return np.sqrt(complex(vec[0], vec[1]))

    with Tape():
        z = ad.register_parameter(np.array([zr, zi]))
        w = ad.csqrt(DiffComplex(z[0], z[1]))
        g = ad.backward(w.re + 2.0 * w.im)[z]
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1e-6
        fp, fm = num(np.array([zr, zi]) + e), num(np.array([zr, zi]) - e)
        fd = ((fp.real + 2 * fp.imag) - (fm.real + 2 * fm.imag)) / 2e-6
        assert abs(g[i] - fd) / max(1.0, abs(fd)) < 1e-5


def test_csqrt_branch_has_nonpositive_imag_for_lossy_input():
    w = ad.csqrt(DiffComplex.const(np.array([4.0 - 2.0j, 1.0 - 1e-9j])))
    assert np.all(w.value.imag <= 0)


def test_two_identical_runs_give_bit_identical_gradients():
    def run():
        with Tape():
            x = ad.register_parameter(np.linspace(0.1, 2.0, 50))
            y = ad.sum(ad.exp(ad.sin(x) * x) / (1.0 + x * x))
            return ad.backward(y)[x]
    assert np.array_equal(run(), run())


def test_reduce_gradients_fixed_order():
    maps = [{0: np.array([0.1]), 1: np.array([1e16])}, {1: np.array([1.0]), 0: np.array([0.2])}]
    out = ad.reduce_gradients(maps)
    assert out[0][0] == 0.1 + 0.2 and out[1][0] == 1e16 + 1.0


# --- checkpointing ------------------------------------------------------------


def test_checkpoint_square():
    with Tape():
        x = ad.register_parameter(3.0)
        y = ad.checkpoint_scope(lambda: x * x)
        g = ad.backward(y)[x]
    assert float(y.value) == 9.0 and float(g) == 6.0


def test_nested_checkpoints_match_direct():
    def f(x):
        return x * ad.exp(x)

    with Tape():
        x = ad.register_parameter(0.8)
        direct = ad.backward(f(x))[x]
    with Tape() as tape:
        x = ad.register_parameter(0.8)
        y = ad.checkpoint_scope(lambda: ad.checkpoint_scope(lambda: ad.checkpoint_scope(lambda: f(x))))
        n_nodes = len(tape)
        g = ad.backward(y)[x]
    assert abs(float(g) - float(direct)) <= 1e-12 * abs(float(direct))
    assert float(y.value) == float(f(Var(0.8)).value)
    assert n_nodes < 10  # interior nodes are not kept


def test_checkpoint_with_fixed_seed_rng_replays():
    with Tape():
        x = ad.register_parameter(np.ones(5))

        def f():
            noise = np.random.default_rng(7).normal(size=5)
            return ad.sum(x * noise)
        y = ad.checkpoint_scope(f)
        g = ad.backward(y)[x]
    np.testing.assert_array_equal(g, np.random.default_rng(7).normal(size=5))


def test_checkpoint_detects_nondeterminism():
    state = {"calls": 0}
    with Tape():
        x = ad.register_parameter(2.0)

        def f():
            state["calls"] += 1
            return x * float(state["calls"])
        y = ad.checkpoint_scope(f)
        with pytest.raises(ad.CheckpointDivergence):
            ad.backward(y)


def test_gradients_lookup_rejects_foreign_var():
    with Tape():
        x = ad.register_parameter(1.0)
        g = ad.backward(x * 3.0)
    with Tape():
        other = ad.register_parameter(1.0)
    with pytest.raises(KeyError):
        g[other]
