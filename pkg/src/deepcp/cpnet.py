"""Unrolled Chambolle-Pock network with learned proximal blocks.

Each unrolled iteration ``n`` computes

    d <- Gamma_n(d + sigma_n * A pbar, y)
    p' <- Lambda_n(p - tau_n * A* d)
    pbar <- p' + theta_n * (p' - p)

``Gamma_n`` and ``Lambda_n`` are residual three-layer 3x3 conv stacks on the
[real, imag] channel representation (4-32-32-2 for the dual block,
2-32-32-2 for the primal block, ReLU after the first two layers).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .errors import InvalidArgumentError, InvalidStateError
from .kspace import as_field
from .tape import Tape, conv2d_3x3, pack_channels, unpack_channels

N_ITERS = 10
HIDDEN = 32
DUAL_IN = 4
PRIMAL_IN = 2
INIT_SIGMA = 0.95
INIT_TAU = 0.95
INIT_THETA = 1.0


@dataclass
class ConvBlockWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        c_in = self.w1.shape[1] if np.ndim(self.w1) == 4 else -1
        expected = {
            "w1": (HIDDEN, c_in, 3, 3), "b1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN, 3, 3), "b2": (HIDDEN,),
            "w3": (2, HIDDEN, 3, 3), "b3": (2,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape or c_in not in (DUAL_IN, PRIMAL_IN):
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @property
    def in_channels(self):
        return self.w1.shape[1]

    def layers(self):
        return [(self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3)]

    @classmethod
    def zeros(cls, c_in):
        return cls(
            np.zeros((HIDDEN, c_in, 3, 3)), np.zeros(HIDDEN),
            np.zeros((HIDDEN, HIDDEN, 3, 3)), np.zeros(HIDDEN),
            np.zeros((2, HIDDEN, 3, 3)), np.zeros(2),
        )

    @classmethod
    def glorot(cls, c_in, rng):
        def kernel(c_out, c_in):
            limit = np.sqrt(6.0 / (9 * c_in + 9 * c_out))
            return rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3))

        return cls(
            kernel(HIDDEN, c_in), np.zeros(HIDDEN),
            kernel(HIDDEN, HIDDEN), np.zeros(HIDDEN),
            kernel(2, HIDDEN), np.zeros(2),
        )


@dataclass
class IterationWeights:
    dual: ConvBlockWeights
    primal: ConvBlockWeights
    sigma: float = INIT_SIGMA
    tau: float = INIT_TAU
    theta: float = INIT_THETA


@dataclass
class CPNetWeights:
    iterations: list
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_iters(self):
        return len(self.iterations)

    @classmethod
    def init(cls, seed=0, n_iters=N_ITERS):
        rng = np.random.default_rng(seed)
        its = [IterationWeights(ConvBlockWeights.glorot(DUAL_IN, rng),
                                ConvBlockWeights.glorot(PRIMAL_IN, rng)) for _ in range(n_iters)]
        return cls(its, seed=seed)

    @classmethod
    def zeros(cls, n_iters=N_ITERS, sigma=INIT_SIGMA, tau=INIT_TAU, theta=INIT_THETA):
        its = [IterationWeights(ConvBlockWeights.zeros(DUAL_IN), ConvBlockWeights.zeros(PRIMAL_IN),
                                sigma, tau, theta) for _ in range(n_iters)]
        return cls(its)

    def named_parameters(self):
        """Flat ordered ``{name: array}`` view; scalars become 0-d arrays."""
        out = {}
        for n, it in enumerate(self.iterations):
            for block_name in ("dual", "primal"):
                block = getattr(it, block_name)
                for k in ("w1", "b1", "w2", "b2", "w3", "b3"):
                    out[f"iter{n:02d}.{block_name}.{k}"] = getattr(block, k)
            for k in ("sigma", "tau", "theta"):
                out[f"iter{n:02d}.{k}"] = np.asarray(float(getattr(it, k)))
        return out

    @classmethod
    def from_named(cls, params, seed=None, meta=None):
        n_iters = len({k.split(".")[0] for k in params})
        its = []
        for n in range(n_iters):
            pre = f"iter{n:02d}."
            try:
                blocks = {
                    b: ConvBlockWeights(*(np.array(params[f"{pre}{b}.{k}"], dtype=np.float64)
                                          for k in ("w1", "b1", "w2", "b2", "w3", "b3")))
                    for b in ("dual", "primal")
                }
                scalars = [float(params[f"{pre}{k}"]) for k in ("sigma", "tau", "theta")]
            except KeyError as exc:
                raise InvalidArgumentError(f"missing weight tensor {exc}") from None
            if blocks["dual"].in_channels != DUAL_IN or blocks["primal"].in_channels != PRIMAL_IN:
                raise InvalidArgumentError(f"iteration {n}: wrong block input channels")
            its.append(IterationWeights(blocks["dual"], blocks["primal"], *scalars))
        return cls(its, seed=seed, meta=dict(meta or {}))

    def copy(self):
        return CPNetWeights.from_named(self.named_parameters(), self.seed, self.meta)

    def manifest(self):
        return {
            "architecture": "cpnet",
            "n_iters": self.n_iters,
            "hidden_channels": HIDDEN,
            "dual_in_channels": DUAL_IN,
            "primal_in_channels": PRIMAL_IN,
            "kernel_size": 3,
            "seed": self.seed,
            **self.meta,
        }


def save_weights(path, w, extra_tensors=None, extra_manifest=None):
    tensors = dict(w.named_parameters())
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    manifest = w.manifest()
    manifest.update(extra_manifest or {})
    fileio.save_tensors(path, tensors, manifest)


def load_weights(path, with_extras=False):
    tensors, manifest = fileio.load_tensors(path)
    params = {k: v for k, v in tensors.items() if k.startswith("iter")}
    extras = {k: v for k, v in tensors.items() if not k.startswith("iter")}
    meta = {k: v for k, v in manifest.items()
            if k not in ("architecture", "n_iters", "hidden_channels", "dual_in_channels",
                         "primal_in_channels", "kernel_size", "seed")}
    w = CPNetWeights.from_named(params, seed=manifest.get("seed"), meta=meta)
    if manifest.get("n_iters") not in (None, w.n_iters):
        raise InvalidArgumentError("checkpoint iteration count does not match its tensors")
    return (w, extras, manifest) if with_extras else w


# --- blocks on plain arrays (no tape) ---------------------------------------

def _conv_stack(t, block):
    (w1, b1), (w2, b2), (w3, b3) = block.layers()
    h = np.maximum(conv2d_3x3(t, w1, b1), 0.0)
    h = np.maximum(conv2d_3x3(h, w2, b2), 0.0)
    return conv2d_3x3(h, w3, b3)


def _same_shape(*fields):
    shapes = {f.shape for f in fields}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"shape mismatch: {sorted(shapes)}")


def dual_block(d, Ap_bar, y, sigma_n, w):
    d, Ap_bar, y = as_field(d), as_field(Ap_bar), as_field(y)
    _same_shape(d, Ap_bar, y)
    u = d + sigma_n * Ap_bar
    t = np.concatenate([pack_channels(u), pack_channels(y)], axis=-3)
    return u + unpack_channels(_conv_stack(t, w))


def primal_block(p, AH_d, tau_n, w):
    p, AH_d = as_field(p), as_field(AH_d)
    _same_shape(p, AH_d)
    v = p - tau_n * AH_d
    return v + unpack_channels(_conv_stack(pack_channels(v), w))


# --- taped forward / backward -----------------------------------------------

def _taped_stack(tape, x, prefix, block):
    h = x
    for k, (wk, bk) in enumerate(block.layers(), start=1):
        wi = tape.leaf(wk, f"{prefix}.w{k}")
        bi = tape.leaf(bk, f"{prefix}.b{k}")
        h = tape.apply("conv2d", h, wi, bi)
        if k < 3:
            h = tape.apply("relu", h)
    return h


def cpnet_forward(y, m, w, tape=None):
    """Evaluate the unrolled network. Returns ``(p_final, tape)``.

    ``y`` may be a single k-space field ``(H, W)`` or a batch ``(B, H, W)``;
    ``m`` a :class:`SamplingMask`, a boolean ``(H, W)`` grid, or a per-sample
    ``(B, H, W)`` stack.
    """
    y = as_field(y, "kspace")
    mk = m.kept if hasattr(m, "kept") else np.asarray(m, dtype=bool)
    if mk.shape[-2:] != y.shape[-2:] or (mk.ndim == 3 and mk.shape[0] != y.shape[0]):
        raise InvalidArgumentError(f"shape mismatch: kspace {y.shape} vs mask {mk.shape}")
    if not isinstance(w, CPNetWeights) or w.n_iters < 1:
        raise InvalidArgumentError("malformed CP-net weights")
    if y.ndim == 2:
        batched_y, batched_m = y[None], (mk[None] if mk.ndim == 2 else mk)
    else:
        batched_y, batched_m = y, mk

    t = tape or Tape()
    yi = t.leaf(batched_y)
    y_pack = t.apply("pack", yi)
    # d0 = 0, p0 = A* y, pbar0 = p0
    p = t.apply("ifft2c", t.apply("mask", yi, mask=batched_m))
    p_bar = p
    d = t.leaf(np.zeros_like(batched_y))
    for n, it in enumerate(w.iterations):
        pre = f"iter{n:02d}"
        s = t.leaf(np.asarray(float(it.sigma)), f"{pre}.sigma")
        ta = t.leaf(np.asarray(float(it.tau)), f"{pre}.tau")
        th = t.leaf(np.asarray(float(it.theta)), f"{pre}.theta")

        Ap_bar = t.apply("mask", t.apply("fft2c", p_bar), mask=batched_m)
        u = t.apply("add", d, t.apply("scale", s, Ap_bar))
        x = t.apply("concat", t.apply("pack", u), y_pack)
        d = t.apply("add", u, t.apply("unpack", _taped_stack(t, x, f"{pre}.dual", it.dual)))

        AH_d = t.apply("ifft2c", t.apply("mask", d, mask=batched_m))
        v = t.apply("sub", p, t.apply("scale", ta, AH_d))
        corr = _taped_stack(t, t.apply("pack", v), f"{pre}.primal", it.primal)
        p_new = t.apply("add", v, t.apply("unpack", corr))

        p_bar = t.apply("add", p_new, t.apply("scale", th, t.apply("sub", p_new, p)))
        p = p_new
    t.mark_output(p)
    out = t[p]
    return (out[0] if y.ndim == 2 else out), t


def cpnet_backward(tape, loss_grad_seed):
    """Gradients of the loss w.r.t. every named weight, given ``dL/d(output)``.

    Returns ``{name: gradient}`` with the same names and shapes as
    :meth:`CPNetWeights.named_parameters`.
    """
    if tape is None or tape.output is None:
        raise InvalidStateError("backward called without a completed forward pass")
    seed = np.asarray(loss_grad_seed, dtype=np.complex128)
    out_shape = np.shape(tape[tape.output])
    if seed.shape != out_shape:
        if seed.shape == out_shape[1:] and out_shape[0] == 1:
            seed = seed[None]
        else:
            raise InvalidArgumentError(f"seed shape {seed.shape} does not match output {out_shape}")
    return tape.backward(seed)


def loss_and_grad(w, y, m, truth):
    """MSE loss of the network output against ``truth`` and its weight gradients."""
    pred, tape = cpnet_forward(y, m, w)
    truth = as_field(truth)
    if truth.shape != pred.shape:
        raise InvalidArgumentError(f"shape mismatch {truth.shape} vs {pred.shape}")
    ti = tape.leaf(truth[None] if truth.ndim == 2 else truth)
    loss = tape.apply("mse", tape.output, ti)
    tape.mark_output(loss)
    return float(tape[loss]), tape.backward(np.asarray(1.0)), pred


def forward_only(y, m, w):
    """Network output without recording a tape (lower memory)."""
    return cpnet_forward(y, m, w)[0]


# --- gradient check ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str
    errors: dict = field(repr=False, default_factory=dict)
    # coordinates whose +/-step probe flipped a ReLU, with the step finally used
    kink_steps: dict = field(repr=False, default_factory=dict)

    def passed(self, tol):
        return self.max_rel_error < tol


def _rel_err(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def relu_pattern(tape):
    """Packed sign pattern of every ReLU input recorded on ``tape``."""
    bits = [tape[e.inputs[0]] > 0 for e in tape.entries if e is not None and e.op == "relu"]
    return np.packbits(np.concatenate([b.ravel() for b in bits])).tobytes() if bits else b""


def grad_check(w, sample, step=1e-5, tol=1e-5, n_coords=200, seed=0, floor=1e-8, max_shrink=6):
    """Compare analytic gradients against central differences.

    ``sample`` is ``(y, mask, truth)``.  Checks ``n_coords`` randomly chosen
    kernel/bias coordinates plus every sigma/tau/theta scalar.  ``floor``
    guards the relative error against vanishing gradients.

    The loss is piecewise smooth (ReLU), so a probe at ``+-step`` can straddle
    a kink, where a central difference does not estimate the derivative.
    Such probes are detected by comparing ReLU sign patterns and retried
    with the step divided by 10 (at most ``max_shrink`` times).
    """
    y, m, truth = sample
    _, grads, _ = loss_and_grad(w, y, m, truth)
    params = w.named_parameters()
    rng = np.random.default_rng(seed)

    tensor_names = [k for k, v in params.items() if v.ndim > 0]
    sizes = np.array([params[k].size for k in tensor_names])
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for f in np.sort(flat):
        i = int(np.searchsorted(bounds, f, side="right"))
        off = int(f - (bounds[i - 1] if i else 0))
        coords.append((tensor_names[i], np.unravel_index(off, params[tensor_names[i]].shape)))
    coords += [(k, ()) for k, v in params.items() if v.ndim == 0]

    def probe(name, idx, delta):
        p = {k: v.copy() for k, v in params.items()}
        p[name][idx] += delta
        pred, tape = cpnet_forward(y, m, CPNetWeights.from_named(p))
        return float(np.mean(np.abs(pred - truth) ** 2)), relu_pattern(tape)

    base_pattern = relu_pattern(cpnet_forward(y, m, w)[1])
    errors, kinks = {}, {}
    for name, idx in coords:
        h = step
        for _ in range(max_shrink + 1):
            (lp, pat_p), (lm, pat_m) = probe(name, idx, h), probe(name, idx, -h)
            if pat_p == pat_m == base_pattern:
                break
            h /= 10
        if h != step:
            kinks[(name, idx)] = h
        fd = (lp - lm) / (2 * h)
        errors[(name, idx)] = _rel_err(float(grads[name][idx]), fd, floor)
    worst = max(errors, key=errors.get)
    return GradCheckReport(errors[worst], len(errors), f"{worst[0]}{[int(i) for i in worst[1]]}", errors, kinks)


def with_scalars(w, sigma=None, tau=None, theta=None):
    its = [replace(it,
                   sigma=it.sigma if sigma is None else sigma,
                   tau=it.tau if tau is None else tau,
                   theta=it.theta if theta is None else theta) for it in w.iterations]
    return CPNetWeights(its, w.seed, dict(w.meta))
