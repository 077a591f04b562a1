"""Independent reference implementations used as test oracles.

Written with plain python/numpy loops and textbook formulas; none of them
import the code under test beyond simple data containers.
"""
import cmath
import math

import numpy as np

C0 = 299_792_458.0
EPS0 = 8.8541878128e-12


def if_samples(tofs, amps, elements, n_elements, f_c, slope, t):
    """Sum of complex tones, one loop iteration per path and sample."""
    out = np.zeros((n_elements, len(t)), complex)
    for tau, a, e in zip(tofs, amps, elements):
        for k, tk in enumerate(t):
            out[e, k] += a * cmath.exp(2j * math.pi * (slope * tk * tau + f_c * tau))
    return out


def fresnel_textbook(eps_r, sigma, cos_i, f_c):
    """r_p, r_s from impedances: eta = 1/sqrt(eps), Snell with the complex index."""
    eps = complex(eps_r, -sigma / (2 * math.pi * f_c * EPS0))
    n = cmath.sqrt(eps)
    sin_i = math.sqrt(max(0.0, 1 - cos_i * cos_i))
    sin_t = sin_i / n
    cos_t = cmath.sqrt(1 - sin_t * sin_t)
    eta = 1 / n
    r_p = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    r_s = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    return r_p, r_s


def dft(x, n=None):
    """O(N^2) zero-padded DFT of a 1D sequence."""
    x = list(x)
    n = n or len(x)
    x = x + [0] * (n - len(x))
    return np.array([sum(x[m] * cmath.exp(-2j * math.pi * k * m / n) for m in range(n)) for k in range(n)])


def ray_triangle(o, d, a, b, c, eps=1e-12):
    """Plane intersection plus barycentric inside test (no Möller–Trumbore)."""
    o, d, a, b, c = (np.asarray(v, float) for v in (o, d, a, b, c))
    nrm = np.cross(b - a, c - a)
    den = float(np.dot(nrm, d))
    if abs(den) < eps * np.linalg.norm(nrm):
        return None
    t = float(np.dot(nrm, a - o)) / den
    if t <= 0:
        return None
    p = o + t * d
    area = np.dot(nrm, nrm)
    w_a = np.dot(np.cross(c - b, p - b), nrm) / area
    w_b = np.dot(np.cross(a - c, p - c), nrm) / area
    w_c = 1 - w_a - w_b
    if min(w_a, w_b, w_c) < -1e-9:
        return None
    return t


def nearest_hit(o, d, tri_vertices):
    best, best_t = -1, math.inf
    for i, (a, b, c) in enumerate(tri_vertices):
        t = ray_triangle(o, d, a, b, c)
        if t is not None and t < best_t:
            best, best_t = i, t
    return best, best_t


def ca_cfar_1d(p, train, guard, scale2):
    """Loop smallest-of CA-CFAR over one range line."""
    n = len(p)
    out = np.zeros(n, bool)
    for i in range(n):
        lead = [p[j] for j in range(i - guard - train, i - guard) if 0 <= j < n]
        lag = [p[j] for j in range(i + guard + 1, i + guard + 1 + train) if 0 <= j < n]
        means = [sum(w) / len(w) for w in (lead, lag) if w]
        if means:
            out[i] = p[i] > scale2 * min(means)
    return out


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)
