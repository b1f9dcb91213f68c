"""Frequency-domain kernels and the operator layers built from them.

Every function here accepts :class:`~hartleyseg.autodiff.DiffValue` inputs
(recorded on their tape) or plain numpy arrays (evaluated directly and
returned as arrays). Spatial tensors are ``(channel, x, y, z)``; banded
spectra use the storage order documented in :mod:`hartleyseg.transforms`.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from . import autodiff as ad
from .transforms import band_reflection

KERNELS = ("hartley_shared", "hartley_mha", "hartley", "fourier")


def _lifted(fn):
    """Let ``fn`` run on bare arrays by wrapping them on a throwaway tape."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, ad.DiffValue) for a in args):
            return fn(*args, **kwargs)
        tape = ad.Tape(enabled=False)
        lifted = [tape.constant(a) if isinstance(a, np.ndarray) else a for a in args]
        out = fn(*lifted, **kwargs)
        return out.value if isinstance(out, ad.DiffValue) else out

    return wrapper


def _mix_impl(weight, x):
    """Channel mixing ``weight @ x`` at every voxel / frequency."""
    letters = "xyzuvw"[: x.ndim - 1]
    return ad.einsum(f"oi,i{letters}->o{letters}", weight, x)


# ---------------------------------------------------------------------------
# kernels on banded spectra


@_lifted
def fourier_conv(U, R):
    """Per-frequency complex product ``R(k) U(k)``.

    ``U`` is a real/imag pair ``(2, c_in, bx, by, bz)`` and ``R`` is
    ``(2, c_out, c_in, bx, by, bz)``.
    """
    if U.shape[-3:] != R.shape[-3:] or U.shape[1] != R.shape[2]:
        raise ValueError(f"band/channel mismatch: U {U.shape}, R {R.shape}")
    spec = "oixyz,ixyz->oxyz"
    ur, ui, rr, ri = U[0], U[1], R[0], R[1]
    re = ad.einsum(spec, rr, ur) - ad.einsum(spec, ri, ui)
    im = ad.einsum(spec, rr, ui) + ad.einsum(spec, ri, ur)
    return ad.stack([re, im])


def reflect(X):
    """Gather ``X(N - k)`` over the last three (banded) axes."""
    for axis in (-3, -2, -1):
        m = X.shape[axis]
        X = ad.take(X, band_reflection(m), axis=X.ndim + axis)
    return X


@_lifted
def hartley_conv(U, R):
    """Hartley-domain convolution with per-frequency real weights.

    ``out(k) = (R(k) (U(k) + U(N-k)) + R(N-k) (U(k) - U(N-k))) / 2`` with
    ``U``: ``(c_in, bx, by, bz)`` and ``R``: ``(c_out, c_in, bx, by, bz)``.
    """
    if U.shape[-3:] != R.shape[-3:] or U.shape[0] != R.shape[1]:
        raise ValueError(f"band/channel mismatch: U {U.shape}, R {R.shape}")
    Uf, Rf = reflect(U), reflect(R)
    spec = "oixyz,ixyz->oxyz"
    return 0.5 * (ad.einsum(spec, R, U + Uf) + ad.einsum(spec, Rf, U - Uf))


@_lifted
def hartley_shared(U, R):
    """The same ``c_out x c_in`` matrix applied at every retained frequency."""
    if U.shape[0] != R.shape[1]:
        raise ValueError(f"channel mismatch: U {U.shape}, R {R.shape}")
    return _mix_impl(R, U)


@_lifted
def patch_group(U):
    """Group a banded spectrum into 2x2x2 frequency patches.

    ``(..., c, 2a, 2b, 2c3)`` becomes ``(..., a*b*c3, 8*c)``; each token row
    holds the eight cell coefficients of every channel (channel fastest).
    """
    *lead, c, bx, by, bz = U.shape
    if bx % 2 or by % 2 or bz % 2:
        raise ValueError(f"banded extents must be even to group, got {(bx, by, bz)}")
    n = len(lead)
    x = U.reshape(*lead, c, bx // 2, 2, by // 2, 2, bz // 2, 2)
    order = list(range(n)) + [n + i for i in (1, 3, 5, 2, 4, 6, 0)]
    x = x.transpose(order)
    return x.reshape(*lead, (bx * by * bz) // 8, 8 * c)


@_lifted
def patch_ungroup(tokens, band):
    """Inverse of :func:`patch_group` for a band of shape ``band``."""
    *lead, t, width = tokens.shape
    bx, by, bz = band
    c = width // 8
    if t * 8 != bx * by * bz or width % 8:
        raise ValueError(f"{tokens.shape} tokens do not tile band {band}")
    n = len(lead)
    x = tokens.reshape(*lead, bx // 2, by // 2, bz // 2, 2, 2, 2, c)
    # inverse of the grouping permutation
    order = list(range(n)) + [n + i for i in (6, 0, 3, 1, 4, 2, 5)]
    x = x.transpose(order)
    return x.reshape(*lead, c, bx, by, bz)


def attention_sizes(k_max, width):
    """Sequence length and score-matrix sizes with and without grouping."""
    n_f = 8 * k_max[0] * k_max[1] * k_max[2]
    return {
        "n_f": n_f,
        "ungrouped_scores": n_f * n_f,
        "tokens": n_f // 8,
        "grouped_scores": (n_f // 8) ** 2,
        "token_width": 8 * width,
    }


@_lifted
def hartley_mha(U, Rq, Rk, Rv, Ro, activation="selu", token_order=None):
    """Multi-head self-attention over 2x2x2-grouped Hartley coefficients.

    ``U``: ``(c_in, bx, by, bz)``; ``Rq``/``Rk``/``Rv``: ``(heads, c_out, c_in)``;
    ``Ro``: ``(c_out, heads * c_out)`` mixes the concatenated heads.

    Each head forms ``Q = U R_Q^T`` (likewise K, V) at every frequency, groups
    the rows into patches of width ``8 c_out`` and computes
    ``SELU(Q K^T / sqrt(8 c_out)) V``. No position encoding is added, so the
    result does not depend on token order; ``token_order`` permutes the
    tokens before attention (and restores them after) to exercise that.
    """
    heads, c_out, c_in = Rq.shape
    if U.shape[0] != c_in:
        raise ValueError(f"channel mismatch: U {U.shape}, R_Q {Rq.shape}")
    if Ro.shape != (c_out, heads * c_out):
        raise ValueError(f"output mixing must be {(c_out, heads * c_out)}, got {Ro.shape}")
    band = U.shape[1:]
    spec = "hoi,ixyz->hoxyz"
    q = patch_group(ad.einsum(spec, Rq, U))
    k = patch_group(ad.einsum(spec, Rk, U))
    v = patch_group(ad.einsum(spec, Rv, U))
    if token_order is not None:
        token_order = np.asarray(token_order)
        q, k, v = (ad.take(a, token_order, axis=1) for a in (q, k, v))
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(8 * c_out))
    if activation == "selu":
        weights = ad.selu(scores)
    elif activation == "softmax":
        weights = ad.softmax(scores, axis=-1)
    else:
        raise ValueError(f"unknown attention activation {activation!r}")
    out = weights @ v
    if token_order is not None:
        out = ad.take(out, np.argsort(token_order), axis=1)
    out = patch_ungroup(out, band)  # (heads, c_out, bx, by, bz)
    out = out.reshape(heads * c_out, *band)
    return _mix_impl(Ro, out)


@_lifted
def selu(x):
    return ad.selu(x)


@_lifted
def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize across channels at each voxel, then scale/shift per channel."""
    return ad.layer_norm(x, gamma, beta, eps)


# ---------------------------------------------------------------------------
# operator layers


def layer_shapes(kernel, d_in, d_out, k_max, n_heads=1):
    """Parameter shapes of one operator layer, keyed by local name."""
    band = tuple(2 * k for k in k_max)
    shapes = {"W": (d_out, d_in), "b": (d_out,)}
    if kernel == "hartley_shared":
        shapes["R"] = (d_out, d_in)
    elif kernel == "hartley":
        shapes["R"] = (d_out, d_in) + band
    elif kernel == "fourier":
        shapes["R"] = (2, d_out, d_in) + band
    elif kernel == "hartley_mha":
        for name in ("Rq", "Rk", "Rv"):
            shapes[name] = (n_heads, d_out, d_in)
        shapes["Ro"] = (d_out, n_heads * d_out)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    shapes["gamma"] = (d_out,)
    shapes["beta"] = (d_out,)
    return shapes


def init_layer(kernel, d_in, d_out, k_max, n_heads, rng):
    """Scaled-uniform weights, unit LN scale, zero biases and shifts."""
    params = {}
    for name, shape in layer_shapes(kernel, d_in, d_out, k_max, n_heads).items():
        if name in ("b", "beta"):
            params[name] = np.zeros(shape)
        elif name == "gamma":
            params[name] = np.ones(shape)
        else:
            fan_out, fan_in = (shape[-2], shape[-1]) if name != "R" else (d_out, d_in)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def effective_band(dims, k_max):
    """Largest usable cutoff on a grid: ``min(k_max, N // 2)`` per axis."""
    k = tuple(min(int(kk), int(n) // 2) for kk, n in zip(k_max, dims))
    if min(k) < 1:
        raise ValueError(f"grid {tuple(dims)} too small for any frequency band")
    return k


def _sub_band(R, k_max, k_eff):
    """Slice per-frequency weights stored for ``k_max`` down to ``k_eff``."""
    if tuple(k_max) == tuple(k_eff):
        return R
    for axis, (k, ke) in enumerate(zip(k_max, k_eff)):
        if k != ke:
            idx = np.concatenate([np.arange(ke), np.arange(2 * k - ke, 2 * k)])
            R = ad.take(R, idx, axis=R.ndim - 3 + axis)
    return R


def spectral_path(u, p, kernel, k_max, activation="selu"):
    """Kernel-integral term ``(K u)(x)`` of an operator layer."""
    dims = u.shape[1:]
    k_eff = effective_band(dims, k_max)
    if kernel == "fourier":
        U = ad.truncate(ad.dft3(u), k_eff)
        out = fourier_conv(U, _sub_band(p["R"], k_max, k_eff))
        return ad.idft3(ad.pad(out, dims))
    U = ad.truncate(ad.dht3(u), k_eff)
    if kernel == "hartley_shared":
        out = hartley_shared(U, p["R"])
    elif kernel == "hartley":
        out = hartley_conv(U, _sub_band(p["R"], k_max, k_eff))
    elif kernel == "hartley_mha":
        out = hartley_mha(U, p["Rq"], p["Rk"], p["Rv"], p["Ro"], activation=activation)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return ad.idht3(ad.pad(out, dims))


def operator_layer(u, p, kernel, k_max, activation="selu"):
    """One update ``SELU(LN(W u(x) + b + (K u)(x)))``."""
    spatial = _mix_impl(p["W"], u) + p["b"].reshape(-1, 1, 1, 1)
    return ad.selu(ad.layer_norm(spatial + spectral_path(u, p, kernel, k_max, activation),
                                 p["gamma"], p["beta"]))


def _sub(p, prefix):
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def residual_block(u, p, kernel, k_max, activation="selu"):
    """Two stacked operator layers with an identity shortcut.

    The first layer always uses the shared Hartley kernel; the second uses
    ``kernel`` (shared Hartley for HNO blocks, Hartley MHA for MHA blocks).
    """
    if u.shape[0] != p["0.W"].shape[0]:
        raise ValueError("residual block needs equal input and output widths")
    h = operator_layer(u, _sub(p, "0."), "hartley_shared", k_max)
    h = operator_layer(h, _sub(p, "1."), kernel, k_max, activation)
    return u + h


def lift(params, tape=None):
    """Wrap a dict of arrays as tape leaves (or constants when ``tape`` is off)."""
    tape = tape or ad.Tape(enabled=False)
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def _run_block(u, p, kernel, k_max):
    if isinstance(u, ad.DiffValue):
        return residual_block(u, p, kernel, k_max)
    tape = ad.Tape(enabled=False)
    p = {k: tape.constant(v) for k, v in p.items()}
    return residual_block(tape.constant(u), p, kernel, k_max).value


def hno_block(u, p, k_max):
    """Residual HNO block: shared-weight Hartley kernels in both layers."""
    return _run_block(u, p, "hartley_shared", k_max)


def hartley_mha_block(u, p, k_max):
    """Residual Hartley MHA block: shared Hartley layer, then attention layer."""
    return _run_block(u, p, "hartley_mha", k_max)


def init_block(kind, width, k_max, n_heads, rng):
    """Parameters of a residual block (``kind``: ``"hno"`` or ``"mha"``)."""
    second = {"hno": "hartley_shared", "mha": "hartley_mha"}[kind]
    p = {f"0.{k}": v for k, v in init_layer("hartley_shared", width, width, k_max, 1, rng).items()}
    p.update({f"1.{k}": v for k, v in init_layer(second, width, width, k_max, n_heads, rng).items()})
    return p
