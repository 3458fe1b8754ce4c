"""Synthetic data, normalization/augmentation, Adam, and the CP-net training loop."""

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .cpnet import CPNetWeights, forward_only, load_weights, loss_and_grad, save_weights
from .errors import ConfigurationError, DegenerateInputError, InvalidArgumentError, TrainingDivergedError
from .kspace import apply_encoding, as_field, generate_poisson_mask
from .phantom import random_phantom_spec, render_phantom

log = logging.getLogger(__name__)

AUGMENT_OPS = ("identity", "flip_h", "flip_v", "rot90", "rot180", "rot270")
INVERSE_OP = {"identity": "identity", "flip_h": "flip_h", "flip_v": "flip_v",
              "rot90": "rot270", "rot180": "rot180", "rot270": "rot90"}


@dataclass
class TrainConfig:
    """Training configuration. Every field can be set from a JSON file or CLI flag.

    ``target_R`` lists the accelerations used; samples cycle through them,
    one shared Poisson-disk mask per value.
    """

    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_count: int = 200
    val_count: int = 20
    size: int = 64
    target_R: tuple = (4.0,)
    calib_radius: float = 4.0
    augment: bool = True
    normalize: bool = True
    n_iters: int = 10
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.target_R, (int, float)):
            self.target_R = (float(self.target_R),)
        self.target_R = tuple(float(r) for r in self.target_R)
        if self.val_count < 1:
            raise ConfigurationError("val_count must be >= 1")
        if self.batch_size < 1 or self.train_count < self.batch_size:
            raise ConfigurationError("need train_count >= batch_size >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not self.target_R:
            raise ConfigurationError("target_R must list at least one acceleration")
        if not 0 <= self.learning_rate < math.inf:
            raise ConfigurationError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["target_R"] = list(self.target_R)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except ValueError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None


def normalize(x):
    """Scale so that the largest magnitude is 1."""
    x = as_field(x)
    peak = np.abs(x).max()
    if peak == 0:
        raise DegenerateInputError("cannot normalize an all-zero field")
    return x / peak


def augment(x, op_id):
    """Exact dihedral transform of the last two axes."""
    x = np.asarray(x)
    if op_id == "identity":
        out = x
    elif op_id == "flip_h":
        out = x[..., :, ::-1]
    elif op_id == "flip_v":
        out = x[..., ::-1, :]
    elif op_id in ("rot90", "rot180", "rot270"):
        out = np.rot90(x, k=int(op_id[3:]) // 90, axes=(-2, -1))
    else:
        raise InvalidArgumentError(f"unknown augmentation {op_id!r}; expected one of {AUGMENT_OPS}")
    return np.ascontiguousarray(out)


def mse_loss(pred, truth):
    """Mean over pixels of ``|pred - truth|^2``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidArgumentError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth) ** 2))


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) complex ground truth
    kspace: np.ndarray  # (N, H, W) complex, zero outside each mask
    mask_index: np.ndarray  # (N,) index into ``masks``
    masks: list
    spec_seeds: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    def mask_stack(self, idx):
        return np.stack([self.masks[i].kept for i in self.mask_index[idx]])

    def R(self, i):
        return self.masks[self.mask_index[i]].target_R


def make_dataset(cfg):
    """Render, normalize and augment phantoms, then undersample them.

    Sample ``i`` draws its phantom from seed ``(cfg.seed, i)``; the first
    ``train_count`` samples form the training split.
    """
    masks = [generate_poisson_mask(cfg.size, cfg.size, R, cfg.calib_radius, cfg.seed + 1000 + j)
             for j, R in enumerate(cfg.target_R)]
    n = cfg.train_count + cfg.val_count
    images = np.empty((n, cfg.size, cfg.size), dtype=np.complex128)
    kspace = np.empty_like(images)
    mask_index = np.arange(n) % len(masks)
    spec_seeds = np.arange(n)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, int(spec_seeds[i])])
        img = render_phantom(random_phantom_spec(rng, cfg.size))
        if cfg.normalize:
            img = normalize(img)
        if cfg.augment:
            img = augment(img, AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))])
        images[i] = img
        kspace[i] = apply_encoding(img, masks[mask_index[i]])
    return Dataset(images, kspace, mask_index, masks, spec_seeds,
                   np.arange(cfg.train_count), np.arange(cfg.train_count, n))


# --- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def to_tensors(self):
        out = {"adam.t": np.asarray(float(self.t))}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, tensors):
        st = cls(t=int(tensors.get("adam.t", 0)))
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                st.m[k[7:]] = np.array(v)
            elif k.startswith("adam.v."):
                st.v[k[7:]] = np.array(v)
        return st


def adam_step(weights, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on a ``{name: array}`` mapping. Inputs are not modified."""
    if set(grads) != set(weights):
        raise InvalidArgumentError("gradient names do not match weight names")
    t = state.t + 1
    new_w, new_state = {}, AdamState(t=t)
    for k, w in weights.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(w):
            raise InvalidArgumentError(f"gradient {k} has shape {g.shape}, weight {np.shape(w)}")
        m = beta1 * state.m.get(k, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(g)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_w[k] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_state.m[k], new_state.v[k] = m, v
    return new_w, new_state


# --- training loop ------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_val_loss: float = math.nan  # validation loss of the untrained weights
    best_epoch: int = -1

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            w.writerow([0, "", repr(self.initial_val_loss), ""])
            for i, (tr, va, s) in enumerate(zip(self.train_loss, self.val_loss, self.seconds), 1):
                w.writerow([i, repr(tr), repr(va), f"{s:.3f}"])


def predict(w, data, idx, batch_size=8):
    out = np.empty((len(idx),) + data.images.shape[1:], dtype=np.complex128)
    for s in range(0, len(idx), batch_size):
        b = idx[s:s + batch_size]
        out[s:s + len(b)] = forward_only(data.kspace[b], data.mask_stack(b), w)
    return out


def validation_loss(w, data, batch_size=8):
    pred = predict(w, data, data.val_idx, batch_size)
    return mse_loss(pred, data.images[data.val_idx])


def _epoch_order(cfg, epoch, n):
    return np.random.default_rng([cfg.seed, 7919, epoch]).permutation(n)


def train(cfg, data=None, resume_from=None, callback=None):
    """Train CP-net with MSE loss and Adam. Returns ``(weights, history)``.

    With ``cfg.checkpoint_dir`` set, writes ``epoch_XXX.cpw`` after every
    epoch plus ``best.cpw`` (lowest validation loss) and ``history.csv``.
    ``resume_from`` continues from an epoch checkpoint; batch order depends
    only on ``(seed, epoch)`` so a resumed run matches an uninterrupted one.
    """
    data = data or make_dataset(cfg)
    hist = TrainHistory()
    if resume_from is not None:
        w, extras, manifest = load_weights(resume_from, with_extras=True)
        state = AdamState.from_tensors(extras)
        start = int(manifest["epoch"])
        prev = manifest.get("history", {})
        hist.train_loss = list(prev.get("train_loss", []))
        hist.val_loss = list(prev.get("val_loss", []))
        hist.seconds = list(prev.get("seconds", []))
        hist.initial_val_loss = float(prev.get("initial_val_loss", math.nan))
        hist.best_epoch = int(prev.get("best_epoch", -1))
    else:
        w = CPNetWeights.init(seed=cfg.seed, n_iters=cfg.n_iters)
        state = AdamState()
        start = 0
        hist.initial_val_loss = validation_loss(w, data)
    stored = cfg.to_dict()
    stored.pop("checkpoint_dir")  # output location, not a training setting
    w.meta = {"train_config": stored}

    params = w.named_parameters()
    n_train = len(data.train_idx)
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        order = data.train_idx[_epoch_order(cfg, epoch, n_train)]
        losses = []
        for s in range(0, n_train, cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, grads, _ = loss_and_grad(CPNetWeights.from_named(params), data.kspace[b],
                                           data.mask_stack(b), data.images[b])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch + 1, loss)
            losses.append(loss * len(b))
            params, state = adam_step(params, grads, state, cfg.learning_rate,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingDivergedError(epoch + 1, math.inf)
        w = CPNetWeights.from_named(params, seed=cfg.seed, meta=w.meta)
        train_loss = float(np.sum(losses) / n_train)
        val = validation_loss(w, data)
        if not (math.isfinite(val) and math.isfinite(train_loss)):
            raise TrainingDivergedError(epoch + 1, val)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val)
        hist.seconds.append(time.perf_counter() - t0)
        is_best = val <= min(hist.val_loss)
        if is_best:
            hist.best_epoch = epoch + 1
        log.info("epoch %d/%d train %.4e val %.4e (%.1fs)", epoch + 1, cfg.epochs,
                 train_loss, val, hist.seconds[-1])
        if cfg.checkpoint_dir:
            _write_checkpoints(cfg, w, state, hist, epoch + 1, is_best)
        if callback is not None:
            callback(epoch + 1, w, hist)
    return w, hist


def _write_checkpoints(cfg, w, state, hist, epoch, is_best):
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    manifest = {
        "epoch": epoch,
        # timing lives in history.csv; checkpoints stay byte-reproducible
        "history": {
            "train_loss": hist.train_loss, "val_loss": hist.val_loss,
            "seconds": [0.0] * len(hist.seconds),
            "initial_val_loss": hist.initial_val_loss, "best_epoch": hist.best_epoch,
        },
    }
    path = os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:03d}.cpw")
    save_weights(path, w, state.to_tensors(), manifest)
    if is_best:
        save_weights(os.path.join(cfg.checkpoint_dir, "best.cpw"), w, state.to_tensors(), manifest)
    hist.to_csv(os.path.join(cfg.checkpoint_dir, "history.csv"))
