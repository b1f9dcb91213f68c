"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to :class:`DiffValue` inputs.
:meth:`Tape.backward` replays the records in reverse, accumulating adjoints
additively, and hands back gradients for the leaves.

Only the operations the segmentation networks need are registered: elementwise
arithmetic, reductions, reshapes, two-operand einsum, the 3D Hartley and
Fourier transforms, band truncation/padding, kernel-2 stride-2 convolutions,
layer normalization, SELU and softmax.

Example::

    tape = Tape()
    x = tape.leaf(np.array(3.0), name="x")
    tape.backward(x * x)["x"]   # -> 6.0
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import transforms as T

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class DiffValue:
    """A value on a tape together with its (lazily allocated) adjoint."""

    __slots__ = ("value", "grad", "tape", "record", "requires_grad", "name", "_id")

    __array_priority__ = 100  # make ndarray + DiffValue defer to DiffValue

    def __init__(self, value, tape, record=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.record = record
        self.requires_grad = requires_grad
        self.name = name
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"DiffValue{label}(shape={self.shape})"

    def _lift(self, other) -> DiffValue:
        return other if isinstance(other, DiffValue) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("div", [self._lift(other), self])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __getitem__(self, index):
        return self.tape.record("index", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.tape.record("transpose", [self], axes=axes or None)


_ids = itertools.count()


@dataclass
class Record:
    op: str
    inputs: list
    output: DiffValue
    saved: Any = None
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Primitive:
    forward: Callable  # (*values, **attrs) -> (out, saved)
    backward: Callable  # (grad_out, saved, *values, **attrs) -> tuple of input grads


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    """Register ``fn`` as the forward of op ``name``; use ``.defvjp`` for backward."""

    def wrap(forward):
        def defvjp(backward):
            PRIMITIVES[name] = Primitive(forward, backward)
            return backward

        forward.defvjp = defvjp
        return forward

    return wrap


class Tape:
    """Ordered record of primitive applications.

    With ``enabled=False`` operations are evaluated but nothing is stored,
    which is how inference runs.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[Record] = []
        self.leaves: list[DiffValue] = []

    def leaf(self, value, name=None, requires_grad=True) -> DiffValue:
        v = DiffValue(value, self, requires_grad=requires_grad and self.enabled, name=name)
        if v.requires_grad:
            self.leaves.append(v)
        return v

    def constant(self, value) -> DiffValue:
        return DiffValue(value, self)

    def record(self, op: str, inputs, **attrs) -> DiffValue:
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise KeyError(f"unregistered operation {op!r}") from None
        inputs = [x if isinstance(x, DiffValue) else self.constant(x) for x in inputs]
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input belongs to a different tape")
        out_value, saved = prim.forward(*(x.value for x in inputs), **attrs)
        if not np.all(np.isfinite(out_value)):
            raise FloatingPointError(f"{op} produced non-finite values")
        tracked = self.enabled and any(x.requires_grad for x in inputs)
        out = DiffValue(out_value, self, requires_grad=tracked)
        if tracked:
            rec = Record(op, inputs, out, saved, attrs)
            out.record = rec
            self.records.append(rec)
        return out

    def backward(self, loss: DiffValue) -> dict:
        """Accumulate ``d loss / d leaf`` into every leaf and clear the tape.

        Returns a dict keyed by leaf name (or the leaf itself when unnamed).
        Leaves that the loss does not depend on receive zero gradients.
        """
        if not isinstance(loss, DiffValue) or loss.tape is not self:
            raise ValueError("loss must be a DiffValue recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records and not self.leaves:
            raise RuntimeError("backward called on an empty tape")

        loss.grad = np.ones_like(loss.value)
        needed = self._reachable(loss)
        for rec in reversed(self.records):
            if id(rec) not in needed or rec.output.grad is None:
                continue
            values = [x.value for x in rec.inputs]
            grads = PRIMITIVES[rec.op].backward(rec.output.grad, rec.saved, *values, **rec.attrs)
            for x, g in zip(rec.inputs, grads):
                if g is None or not x.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64)
                if g.shape != x.shape:
                    raise AssertionError(f"{rec.op}: adjoint shape {g.shape} != {x.shape}")
                x.grad = g.copy() if x.grad is None else x.grad + g

        result = {}
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            result[leaf.name if leaf.name is not None else leaf] = leaf.grad
        self.records.clear()
        return result

    def _reachable(self, loss):
        needed = set()
        stack = [loss]
        seen = set()
        while stack:
            v = stack.pop()
            if v._id in seen or v.record is None:
                continue
            seen.add(v._id)
            needed.add(id(v.record))
            stack.extend(v.record.inputs)
        return needed


def record(op: str, inputs, **attrs):
    """Apply a registered primitive to values on a common tape.

    With no :class:`DiffValue` among ``inputs`` the primitive is simply
    evaluated and a plain array returned.
    """
    tape = next((x.tape for x in inputs if isinstance(x, DiffValue)), None)
    if tape is None:
        return PRIMITIVES[op].forward(*(np.asarray(x, dtype=np.float64) for x in inputs), **attrs)[0]
    return tape.record(op, inputs, **attrs)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@primitive("add")
def _add(a, b):
    return a + b, None


@_add.defvjp
def _add_vjp(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@primitive("sub")
def _sub(a, b):
    return a - b, None


@_sub.defvjp
def _sub_vjp(g, _, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@primitive("mul")
def _mul(a, b):
    return a * b, None


@_mul.defvjp
def _mul_vjp(g, _, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("div")
def _div(a, b):
    return a / b, None


@_div.defvjp
def _div_vjp(g, _, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@primitive("neg")
def _neg(a):
    return -a, None


@_neg.defvjp
def _neg_vjp(g, _, a):
    return (-g,)


@primitive("square")
def _square(a):
    return a * a, None


@_square.defvjp
def _square_vjp(g, _, a):
    return (2.0 * a * g,)


@primitive("sqrt")
def _sqrt(a):
    with np.errstate(invalid="ignore"):  # negative inputs are rejected by the tape
        out = np.sqrt(a)
    return out, out


@_sqrt.defvjp
def _sqrt_vjp(g, out, a):
    return (g / (2.0 * out),)


@primitive("exp")
def _exp(a):
    out = np.exp(a)
    return out, out


@_exp.defvjp
def _exp_vjp(g, out, a):
    return (g * out,)


@primitive("sum")
def _sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), None


@_sum.defvjp
def _sum_vjp(g, _, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


@primitive("reshape")
def _reshape(a, shape):
    return a.reshape(shape), None


@_reshape.defvjp
def _reshape_vjp(g, _, a, shape):
    return (g.reshape(a.shape),)


@primitive("transpose")
def _transpose(a, axes=None):
    return np.transpose(a, axes), None


@_transpose.defvjp
def _transpose_vjp(g, _, a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return (np.transpose(g, inv),)


@primitive("index")
def _index(a, index):
    return a[index], None


@_index.defvjp
def _index_vjp(g, _, a, index):
    out = np.zeros_like(a)
    np.add.at(out, index, g)
    return (out,)


@primitive("take")
def _take(a, indices, axis):
    return np.take(a, indices, axis=axis), None


@_take.defvjp
def _take_vjp(g, _, a, indices, axis):
    out = np.zeros_like(a)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, indices, np.moveaxis(g, axis, 0))
    return (out,)


@primitive("stack")
def _stack(*arrays, axis=0):
    return np.stack(arrays, axis=axis), None


@_stack.defvjp
def _stack_vjp(g, _, *arrays, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))


@primitive("concat")
def _concat(*arrays, axis=0):
    return np.concatenate(arrays, axis=axis), None


@_concat.defvjp
def _concat_vjp(g, _, *arrays, axis=0):
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


@primitive("matmul")
def _matmul(a, b):
    return np.matmul(a, b), None


@_matmul.defvjp
def _matmul_vjp(g, _, a, b):
    if a.ndim == 1 or b.ndim == 1:
        raise NotImplementedError("matmul adjoint needs operands of rank >= 2")
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _parse_einsum(spec):
    lhs, out = spec.replace(" ", "").split("->")
    a, b = lhs.split(",")
    return a, b, out


@primitive("einsum")
def _einsum(a, b, spec):
    sa, sb, so = _parse_einsum(spec)
    if not set(sa) <= set(sb) | set(so) or not set(sb) <= set(sa) | set(so):
        raise ValueError(f"einsum {spec!r}: every index must be shared or kept")
    return np.einsum(spec, a, b, optimize=True), None


@_einsum.defvjp
def _einsum_vjp(g, _, a, b, spec):
    sa, sb, so = _parse_einsum(spec)
    ga = np.einsum(f"{so},{sb}->{sa}", g, b, optimize=True)
    gb = np.einsum(f"{so},{sa}->{sb}", g, a, optimize=True)
    return ga, gb


# ---------------------------------------------------------------------------
# spectral primitives (last three axes)


@primitive("dht3")
def _dht3(x, norm="forward"):
    return T.dht(x, norm), None


@_dht3.defvjp
def _dht3_vjp(g, _, x, norm="forward"):
    # the cas matrix is symmetric, so the adjoint is the same transform
    return (T.dht(g, norm),)


@primitive("idht3")
def _idht3(s, norm="forward"):
    return T.dht(s, norm, inverse=True), None


@_idht3.defvjp
def _idht3_vjp(g, _, s, norm="forward"):
    return (T.dht(g, norm, inverse=True),)


@primitive("dft3")
def _dft3(x, norm="forward"):
    spec = T.dft(x, norm)
    return np.stack([spec.real, spec.imag]), None


@_dft3.defvjp
def _dft3_vjp(g, _, x, norm="forward"):
    # adjoint of x -> (Re Fx, Im Fx) is (gr, gi) -> Re(conj(F)(gr + i gi))
    n = float(np.prod(x.shape[-3:]))
    back = np.fft.ifftn(g[0] + 1j * g[1], axes=T.AXES) * n
    scale = 1.0 / n if norm == "forward" else 1.0
    return (back.real * scale,)


@primitive("idft3")
def _idft3(pair, norm="forward"):
    return T.idft(pair[0] + 1j * pair[1], norm).real, None


@_idft3.defvjp
def _idft3_vjp(g, _, pair, norm="forward"):
    # adjoint of (a, b) -> Re(G(a + i b)), G = conj(F)*s, is g -> (Re, Im) of F g * s
    n = float(np.prod(pair.shape[-3:]))
    scale = 1.0 if norm == "forward" else 1.0 / n
    spec = np.fft.fftn(g, axes=T.AXES) * scale
    return (np.stack([spec.real, spec.imag]),)


@primitive("truncate")
def _truncate(x, k_max):
    return T.truncate_array(x, k_max), None


@_truncate.defvjp
def _truncate_vjp(g, _, x, k_max):
    return (T.pad_array(g, x.shape[-3:]),)


@primitive("pad")
def _pad(x, dims):
    return T.pad_array(x, dims), None


@_pad.defvjp
def _pad_vjp(g, _, x, dims):
    return (T.truncate_array(g, tuple(b // 2 for b in x.shape[-3:])),)


# ---------------------------------------------------------------------------
# kernel-2 stride-2 resampling convolutions on (channel, x, y, z)


def _blocks(x):
    c, nx, ny, nz = x.shape
    return x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)


@primitive("conv_down")
def _conv_down(x, w, b):
    """``w``: (out, in, 2, 2, 2); ``x`` spatial dims must be even."""
    if any(n % 2 for n in x.shape[1:]):
        raise ValueError(f"stride-2 convolution needs even dims, got {x.shape[1:]}")
    out = np.einsum("iaxbycz,oixyz->oabc", _blocks(x), w, optimize=True)
    return out + b[:, None, None, None], None


@_conv_down.defvjp
def _conv_down_vjp(g, _, x, w, b):
    gx = np.einsum("oabc,oixyz->iaxbycz", g, w, optimize=True).reshape(x.shape)
    gw = np.einsum("oabc,iaxbycz->oixyz", g, _blocks(x), optimize=True)
    return gx, gw, g.sum(axis=(1, 2, 3))


@primitive("conv_up")
def _conv_up(x, w, b):
    """Transposed convolution; ``w``: (in, out, 2, 2, 2)."""
    c, nx, ny, nz = x.shape
    out = np.einsum("iabc,ioxyz->oaxbycz", x, w, optimize=True)
    out = out.reshape(w.shape[1], 2 * nx, 2 * ny, 2 * nz)
    return out + b[:, None, None, None], None


@_conv_up.defvjp
def _conv_up_vjp(g, _, x, w, b):
    gb = _blocks(g)
    gx = np.einsum("oaxbycz,ioxyz->iabc", gb, w, optimize=True)
    gw = np.einsum("oaxbycz,iabc->ioxyz", gb, x, optimize=True)
    return gx, gw, g.sum(axis=(1, 2, 3))


# ---------------------------------------------------------------------------
# normalization and activations (channel axis 0)


@primitive("layer_norm")
def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)
    xhat = xc * inv
    shape = (-1,) + (1,) * (x.ndim - 1)
    return gamma.reshape(shape) * xhat + beta.reshape(shape), (xhat, inv)


@_layer_norm.defvjp
def _layer_norm_vjp(g, saved, x, gamma, beta, eps=1e-5):
    xhat, inv = saved
    shape = (-1,) + (1,) * (x.ndim - 1)
    other = tuple(range(1, x.ndim))
    ggamma = (g * xhat).sum(axis=other)
    gbeta = g.sum(axis=other)
    gx_hat = g * gamma.reshape(shape)
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=0, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=0, keepdims=True)
    )
    return gx, ggamma, gbeta


@primitive("selu")
def _selu(x):
    neg = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    return np.where(x > 0, SELU_LAMBDA * x, neg), None


@_selu.defvjp
def _selu_vjp(g, _, x):
    # right derivative at exactly zero
    d = np.where(x >= 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    return (g * d,)


@primitive("softmax")
def _softmax(x, axis=0):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return out, out


@_softmax.defvjp
def _softmax_vjp(g, out, x, axis=0):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# thin functional wrappers


def square(x):
    return record("square", [x])


def sqrt(x):
    return record("sqrt", [x])


def exp(x):
    return record("exp", [x])


def einsum(spec, a, b):
    return record("einsum", [a, b], spec=spec)


def take(x, indices, axis):
    return record("take", [x], indices=np.asarray(indices), axis=axis)


def stack(values, axis=0):
    return record("stack", list(values), axis=axis)


def concat(values, axis=0):
    return record("concat", list(values), axis=axis)


def selu(x):
    return record("selu", [x])


def softmax(x, axis=0):
    return record("softmax", [x], axis=axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    return record("layer_norm", [x, gamma, beta], eps=eps)


def dht3(x, norm="forward"):
    return record("dht3", [x], norm=norm)


def idht3(x, norm="forward"):
    return record("idht3", [x], norm=norm)


def dft3(x, norm="forward"):
    return record("dft3", [x], norm=norm)


def idft3(x, norm="forward"):
    return record("idft3", [x], norm=norm)


def truncate(x, k_max):
    return record("truncate", [x], k_max=tuple(k_max))


def pad(x, dims):
    return record("pad", [x], dims=tuple(dims))


def conv_down(x, w, b):
    return record("conv_down", [x, w, b])


def conv_up(x, w, b):
    return record("conv_up", [x, w, b])


def selu_array(x: np.ndarray) -> np.ndarray:
    return _selu(np.asarray(x, dtype=np.float64))[0]


# ---------------------------------------------------------------------------


def grad_check(f, inputs, step: float = 1e-4, indices=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, *leaves)`` must return a scalar :class:`DiffValue`. ``inputs``
    is a sequence of arrays; every entry of every array is perturbed unless
    ``indices`` maps an input position to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    tape = Tape()
    leaves = [tape.leaf(a, name=i) for i, a in enumerate(inputs)]
    loss = f(tape, *leaves)
    analytic = tape.backward(loss)

    def evaluate(arrays):
        t = Tape(enabled=False)
        val = f(t, *[t.constant(a) for a in arrays])
        val = val.value if isinstance(val, DiffValue) else val
        if not np.all(np.isfinite(val)):
            raise FloatingPointError("non-finite value during finite differencing")
        return float(val)

    worst = 0.0
    for i, a in enumerate(inputs):
        flat_ids = range(a.size) if indices is None or i not in indices else indices[i]
        for j in flat_ids:
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[i].flat[j] += step
            minus[i].flat[j] -= step
            central = (evaluate(plus) - evaluate(minus)) / (2 * step)
            an = float(analytic[i].flat[j])
            err = abs(an - central) / max(abs(an), abs(central), 1e-8)
            worst = max(worst, err)
    return worst
