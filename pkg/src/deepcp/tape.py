"""A small reverse-mode differentiation tape for the CP-net primitives.

Values are numpy arrays: complex fields ``(..., H, W)`` and real channel
tensors ``(B, C, H, W)``.  For a real loss ``L`` and a complex value ``z``
the stored gradient is ``dL/dRe(z) + 1j * dL/dIm(z)``; with this convention
a complex-linear map backpropagates through its adjoint.
"""

from dataclasses import dataclass

import numpy as np

from . import kspace
from .errors import InvalidArgumentError, InvalidStateError


# --- primitive kernels ------------------------------------------------------

def conv2d_3x3(x, weight, bias):
    """Same-size 3x3 cross-correlation with zero padding, stride 1.

    ``x``: (B, C_in, H, W) or (C_in, H, W); ``weight``: (C_out, C_in, 3, 3);
    ``bias``: (C_out,).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    c_out, c_in = weight.shape[:2]
    if weight.shape != (c_out, c_in, 3, 3) or x.shape[1] != c_in or bias.shape != (c_out,):
        raise InvalidArgumentError(
            f"conv shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    b, _, h, w = x.shape
    out = np.matmul(_kernel_matrix(weight), _im2col(x))  # (B, C_out, H*W)
    out += bias[:, None]
    out = out.reshape(b, c_out, h, w)
    return out[0] if squeeze else out


def _kernel_matrix(weight):
    # rows ordered (ky, kx, c_in) to match _im2col
    c_out, c_in = weight.shape[:2]
    return weight.transpose(0, 2, 3, 1).reshape(c_out, 9 * c_in)


def _im2col(x):
    """(B, C, H, W) -> (B, 9*C, H*W) of zero-padded 3x3 neighbourhoods."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, 3, 3, c, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(b, 9 * c, h * w)


def _conv_vjp(g, x, weight):
    b, c_out, h, w = g.shape
    c_in = weight.shape[1]
    g3 = g.reshape(b, c_out, h * w)
    gk = np.matmul(g3, _im2col(x).transpose(0, 2, 1)).sum(axis=0)  # (C_out, 9*C_in)
    gw = gk.reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
    gb = g3.sum(axis=(0, 2))
    # adjoint of a padded correlation: correlate with the flipped, transposed kernel
    w_adj = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gx = conv2d_3x3(g, w_adj, np.zeros(c_in))
    return gx, np.ascontiguousarray(gw), gb


def pack_channels(x):
    """Complex ``(..., H, W)`` -> real ``(..., 2, H, W)``: [real, imag]."""
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-3).astype(np.float64)


def unpack_channels(t):
    t = np.asarray(t)
    if t.ndim < 3 or t.shape[-3] != 2:
        raise InvalidArgumentError(f"expected 2 channels on axis -3, got shape {t.shape}")
    return t[..., 0, :, :] + 1j * t[..., 1, :, :]


def _masked(x, m):
    return np.where(m, x, 0)


# --- primitive table: forward(values, attrs) and vjp(g, values, out, attrs) ---

def _fwd_scale(v, a):
    s, x = v
    return s * x


def _vjp_scale(g, v, out, a):
    s, x = v
    gs = np.vdot(x, g).real if np.iscomplexobj(x) or np.iscomplexobj(g) else np.vdot(x, g)
    return np.asarray(gs, dtype=np.float64), s * g


def _vjp_mse(g, v, out, a):
    pred, truth = v
    diff = pred - truth
    return (2.0 * g / diff.size) * diff, None


def _vjp_concat(g, v, out, a):
    n0 = v[0].shape[-3]
    return g[..., :n0, :, :], g[..., n0:, :, :]


def _vjp_pack(g, v, out, a):
    return unpack_channels(g)


PRIMITIVES = {
    "fft2c": (lambda v, a: kspace.fft2c(v[0]), lambda g, v, o, a: (kspace.ifft2c(g),)),
    "ifft2c": (lambda v, a: kspace.ifft2c(v[0]), lambda g, v, o, a: (kspace.fft2c(g),)),
    "mask": (lambda v, a: _masked(v[0], a["mask"]), lambda g, v, o, a: (_masked(g, a["mask"]),)),
    "scale": (_fwd_scale, _vjp_scale),
    "add": (lambda v, a: v[0] + v[1], lambda g, v, o, a: (g, g)),
    "sub": (lambda v, a: v[0] - v[1], lambda g, v, o, a: (g, -g)),
    "pack": (lambda v, a: pack_channels(v[0]), lambda g, v, o, a: (_vjp_pack(g, v, o, a),)),
    "unpack": (lambda v, a: unpack_channels(v[0]),
               lambda g, v, o, a: (np.stack([g.real, g.imag], axis=-3),)),
    "concat": (lambda v, a: np.concatenate(v, axis=-3), _vjp_concat),
    "conv2d": (lambda v, a: conv2d_3x3(*v), lambda g, v, o, a: _conv_vjp(g, v[0], v[1])),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a: (g * (v[0] > 0),)),
    "mse": (lambda v, a: np.asarray(np.mean(np.abs(v[0] - v[1]) ** 2)), _vjp_mse),
}


@dataclass
class Entry:
    op: str
    inputs: tuple
    attrs: dict


class Tape:
    """Records primitive applications; ``backward`` walks them in reverse.

    Leaves are created with :meth:`leaf`; named leaves are the parameters
    whose gradients :meth:`backward` returns.  Leaf values are copied, so a
    tape is unaffected by later in-place changes to the caller's arrays.
    """

    def __init__(self):
        self.values = []
        self.entries = []  # None for leaves
        self.names = {}  # node id -> parameter name
        self.output = None

    def __len__(self):
        return len(self.values)

    def leaf(self, value, name=None):
        self.values.append(np.array(value, copy=True))
        self.entries.append(None)
        idx = len(self.values) - 1
        if name is not None:
            self.names[idx] = name
        return idx

    def apply(self, op, *inputs, **attrs):
        fwd, _ = PRIMITIVES[op]
        out = fwd([self.values[i] for i in inputs], attrs)
        self.values.append(out)
        self.entries.append(Entry(op, tuple(inputs), attrs))
        return len(self.values) - 1

    def __getitem__(self, idx):
        return self.values[idx]

    def count(self, op):
        return sum(1 for e in self.entries if e is not None and e.op == op)

    def mark_output(self, idx):
        self.output = idx
        return idx

    def replay(self):
        """Re-run every recorded op from the leaf values; returns all node values."""
        vals = []
        for value, entry in zip(self.values, self.entries):
            if entry is None:
                vals.append(value)
            else:
                vals.append(PRIMITIVES[entry.op][0]([vals[i] for i in entry.inputs], entry.attrs))
        return vals

    def backward(self, seed, output=None):
        """Gradients of ``<seed, output>`` w.r.t. every named leaf.

        ``seed`` is the gradient of the scalar loss with respect to the
        output node (a scalar 1.0 when the output is itself the loss).
        """
        out = self.output if output is None else output
        if out is None or not any(e is not None for e in self.entries):
            raise InvalidStateError("tape has no recorded forward pass")
        seed = np.asarray(seed)
        if seed.shape != np.shape(self.values[out]):
            raise InvalidArgumentError(
                f"seed shape {seed.shape} does not match output {np.shape(self.values[out])}")
        grads = {out: seed}
        for idx in range(out, -1, -1):
            entry = self.entries[idx]
            if entry is None or idx not in grads:
                continue
            g = grads.pop(idx)
            vals = [self.values[i] for i in entry.inputs]
            parts = PRIMITIVES[entry.op][1](g, vals, self.values[idx], entry.attrs)
            for i, gi in zip(entry.inputs, parts):
                if gi is None:
                    continue
                gi = _unbroadcast(gi, self.values[i])
                grads[i] = grads[i] + gi if i in grads else gi
        result = {}
        for idx, name in self.names.items():
            g = grads.get(idx)
            if g is None:
                g = np.zeros_like(self.values[idx])
            elif not np.iscomplexobj(self.values[idx]) and np.iscomplexobj(g):
                g = g.real
            result[name] = np.asarray(g).reshape(np.shape(self.values[idx]))
        return result


def _unbroadcast(g, value):
    """Sum ``g`` down to ``value``'s shape (scalars and broadcast inputs)."""
    shape = np.shape(value)
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g
