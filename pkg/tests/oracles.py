"""Reference computations kept independent of the code paths they check."""

import math

import numpy as np
import torch


def butterworth_bandpass_gain(f, fs, lo, hi, order):
    """|H(f)| of a digital Butterworth bandpass built by the bilinear transform.

    Analog lowpass prototype ``1 / sqrt(1 + w^(2n))`` with the lowpass-to-bandpass
    substitution ``w = (W^2 - W0^2) / (W * B)`` on pre-warped frequencies.
    """
    warp = lambda x: 2.0 * fs * math.tan(math.pi * x / fs)  # noqa: E731
    w1, w2, w = warp(lo), warp(hi), warp(f)
    proto = (w * w - w1 * w2) / (w * (w2 - w1))
    return 1.0 / math.sqrt(1.0 + proto ** (2 * order))


def notch_gain(f, fs, f0, q):
    """|H(f)| of the standard second-order IIR notch at ``f0`` with quality ``q``."""
    w0 = 2 * math.pi * f0 / fs
    bw = w0 / q
    beta = math.tan(bw / 2.0)
    gain = 1.0 / (1.0 + beta)
    z = np.exp(1j * 2 * math.pi * f / fs)
    num = gain * (1 - 2 * math.cos(w0) / z + 1 / z ** 2)
    den = 1 - 2 * gain * math.cos(w0) / z + (2 * gain - 1) / z ** 2
    return float(abs(num / den))


def steady_amplitude(y, trim):
    """Peak amplitude of a sinusoid away from the edges."""
    core = y[trim:-trim]
    return math.sqrt(2.0 * np.mean(core ** 2))


def pareto_grid(g1, g2, step=1e-5):
    """Brute-force min over the grid of |a g1 + (1-a) g2| (quadratic form in float64)."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    aa, ab, bb = g1 @ g1, g1 @ g2, g2 @ g2
    alpha = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    sq = alpha ** 2 * aa + 2 * alpha * (1 - alpha) * ab + (1 - alpha) ** 2 * bb
    norms = np.sqrt(np.maximum(sq, 0.0))
    k = int(np.argmin(norms))
    return alpha[k], norms


def central_difference(fn, params, eps=1e-4, coords=None):
    """Central differences of scalar ``fn()`` w.r.t. chosen coordinates of ``params``.

    ``coords`` is a list of ``(param_index, flat_index)``; default is all of them.
    """
    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    out = []
    with torch.no_grad():
        for i, j in coords:
            flat = params[i].view(-1)
            old = flat[j].item()
            flat[j] = old + eps
            up = float(fn())
            flat[j] = old - eps
            down = float(fn())
            flat[j] = old
            out.append((up - down) / (2 * eps))
    return np.array(out)


def directional_difference(fn, params, directions, eps=1e-5):
    """Central difference of ``fn`` along a joint direction over ``params``."""
    with torch.no_grad():
        for p, d in zip(params, directions):
            p += eps * d
        up = float(fn())
        for p, d in zip(params, directions):
            p -= 2 * eps * d
        down = float(fn())
        for p, d in zip(params, directions):
            p += eps * d
    return (up - down) / (2 * eps)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
