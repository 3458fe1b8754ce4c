import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepcp import training
from deepcp.cpnet import CPNetWeights, load_weights
from deepcp.errors import (
    ConfigurationError,
    DegenerateInputError,
    InvalidArgumentError,
    TrainingDivergedError,
)
from deepcp.kspace import apply_encoding
from deepcp.phantom import (
    Ellipse,
    PhantomSpec,
    SHEPP_LOGAN_TABLE,
    random_phantom_spec,
    render_phantom,
    shepp_logan_spec,
)
from deepcp.training import (
    AUGMENT_OPS,
    INVERSE_OP,
    AdamState,
    TrainConfig,
    adam_step,
    augment,
    make_dataset,
    mse_loss,
    normalize,
    train,
)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=2, train_count=4, val_count=2, size=16, target_R=(3.0,),
                calib_radius=2.0, n_iters=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- phantoms ----------------------------------------------------------------------

def test_phantom_big_circle_constant():
    spec = PhantomSpec((Ellipse(0, 0, 2, 2, 0, 1.0),), 8, 8)
    assert np.all(render_phantom(spec) == 1)


def test_phantom_outside_is_zero():
    spec = PhantomSpec((Ellipse(0.5, 0.5, 0.1, 0.1, 0, 1.0),), 16, 16)
    img = render_phantom(spec)
    assert img[15, 0] == 0 and img.imag.max() == 0
    assert img[4, 12] == 1  # pixel center (0.5625, 0.4375) lies inside


def test_shepp_logan_center_value_by_membership():
    # 65x65 grid: the middle pixel sits exactly at (0, 0)
    img = render_phantom(shepp_logan_spec(65))
    total = 0.0
    for val, a, b, x0, y0, phi in SHEPP_LOGAN_TABLE:
        t = np.deg2rad(phi)
        u = -x0 * np.cos(t) - y0 * np.sin(t)
        v = x0 * np.sin(t) - y0 * np.cos(t)
        if (u / a) ** 2 + (v / b) ** 2 <= 1:
            total += val
    assert img[32, 32].real == pytest.approx(total)


def test_phantom_spec_validation():
    with pytest.raises(InvalidArgumentError):
        PhantomSpec((), 8, 8)
    with pytest.raises(InvalidArgumentError):
        PhantomSpec((Ellipse(0, 0, 0, 1, 0, 1),), 8, 8)


def test_random_phantoms_vary():
    a = render_phantom(random_phantom_spec(np.random.default_rng(0), 32))
    b = render_phantom(random_phantom_spec(np.random.default_rng(1), 32))
    assert not np.array_equal(a, b)
    assert np.array_equal(a, render_phantom(random_phantom_spec(np.random.default_rng(0), 32)))


# --- normalization and augmentation -------------------------------------------------------

def test_normalize():
    x = np.array([[1, -4], [2j, 0]])
    np.testing.assert_array_equal(normalize(x), x / 4)
    y = normalize(x)
    assert np.abs(normalize(y) - y).max() <= 1e-15
    with pytest.raises(DegenerateInputError):
        normalize(np.zeros((3, 3)))


def test_augment_group():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
    y = x
    for _ in range(4):
        y = augment(y, "rot90")
    assert np.array_equal(y, x)
    assert np.array_equal(augment(augment(x, "flip_h"), "flip_h"), x)
    for op in AUGMENT_OPS:
        assert np.array_equal(augment(augment(x, op), INVERSE_OP[op]), x)
        assert np.linalg.norm(augment(x, op)) == np.linalg.norm(x)
    with pytest.raises(InvalidArgumentError):
        augment(x, "shear")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(AUGMENT_OPS), st.sampled_from(AUGMENT_OPS), st.integers(0, 1000))
def test_augment_closure_bit_exact(op1, op2, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    y = augment(augment(x, op1), op2)
    back = augment(augment(y, INVERSE_OP[op2]), INVERSE_OP[op1])
    assert np.array_equal(back, x)


# --- loss and Adam -------------------------------------------------------------

def test_mse_loss():
    rng = np.random.default_rng(1)
    t = rng.standard_normal((4, 4)) + 0j
    assert mse_loss(t, t) == 0
    assert mse_loss(t + (0.3 - 0.4j), t) == pytest.approx(0.25)
    assert mse_loss(np.array([[1, 1j]]), np.zeros((1, 2))) == 1
    with pytest.raises(InvalidArgumentError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mse_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
    b = a.copy()
    assert mse_loss(a, b) == 0
    b[1, 1] += 1e-3
    assert mse_loss(a, b) > 0


def test_adam_zero_gradient_keeps_weights():
    w = {"a": np.array([1.0, -2.0]), "s": np.asarray(0.5)}
    g = {k: np.zeros_like(v) for k, v in w.items()}
    new, st_ = adam_step(w, g, AdamState())
    assert all(np.array_equal(new[k], w[k]) for k in w)
    assert st_.t == 1


def test_adam_first_step_is_sign():
    w = {"a": np.array([1.0, -2.0, 0.3])}
    g = {"a": np.array([0.5, -3.0, 1e-3])}
    new, _ = adam_step(w, g, AdamState(), lr=1e-3)
    np.testing.assert_allclose(new["a"] - w["a"], -1e-3 * np.sign(g["a"]), rtol=1e-4)


def test_adam_deterministic_and_shape_checks():
    rng = np.random.default_rng(2)
    w = {"a": rng.standard_normal(5)}
    g = {"a": rng.standard_normal(5)}
    s = AdamState()
    a1, s1 = adam_step(w, g, s)
    a2, s2 = adam_step(w, g, s)
    assert np.array_equal(a1["a"], a2["a"]) and np.array_equal(s1.m["a"], s2.m["a"])
    with pytest.raises(InvalidArgumentError):
        adam_step(w, {"a": np.zeros(4)}, s)
    with pytest.raises(InvalidArgumentError):
        adam_step(w, {"b": np.zeros(5)}, s)


# --- config and dataset ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(val_count=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(train_count=2, batch_size=4)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    assert TrainConfig(target_R=5).target_R == (5.0,)


def test_config_file_round_trip(tmp_path):
    cfg = tiny_cfg()
    import json
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_file(tmp_path / "c.json") == cfg


def test_dataset_split_and_determinism():
    cfg = tiny_cfg(train_count=8, val_count=2)
    a, b = make_dataset(cfg), make_dataset(cfg)
    assert len(a.images) == 10
    assert set(a.train_idx).isdisjoint(a.val_idx)
    assert len({a.images[i].tobytes() for i in range(10)}) == 10
    assert np.array_equal(a.images, b.images) and np.array_equal(a.kspace, b.kspace)
    for i in range(10):
        m = a.masks[a.mask_index[i]]
        assert np.linalg.norm(apply_encoding(a.images[i], m) - a.kspace[i]) == 0
        assert np.abs(a.images[i]).max() == pytest.approx(1.0)


def test_dataset_multiple_R():
    data = make_dataset(tiny_cfg(size=32, target_R=(2.0, 4.0), train_count=4))
    assert [data.R(i) for i in range(4)] == [2.0, 4.0, 2.0, 4.0]


# --- training loop ------------------------------------------------------------------

def test_train_lr_zero_keeps_weights():
    cfg = tiny_cfg(learning_rate=0.0)
    w, hist = train(cfg)
    init = CPNetWeights.init(seed=cfg.seed, n_iters=cfg.n_iters).named_parameters()
    for k, v in w.named_parameters().items():
        assert np.array_equal(v, init[k]), k
    assert len(hist.val_loss) == len(hist.train_loss) == cfg.epochs
    assert hist.val_loss[0] == hist.val_loss[1] == hist.initial_val_loss
    assert hist.train_loss[0] == hist.train_loss[1]


def test_train_reduces_loss_and_checkpoints(tmp_path):
    cfg = tiny_cfg(epochs=3, checkpoint_dir=str(tmp_path))
    w, hist = train(cfg)
    assert hist.val_loss[-1] < hist.initial_val_loss
    assert hist.train_loss[-1] < hist.train_loss[0]
    for e in (1, 2, 3):
        assert (tmp_path / f"epoch_{e:03d}.cpw").exists()
    best = load_weights(tmp_path / "best.cpw")
    assert best.n_iters == 2
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,seconds" and len(lines) == 5


def test_train_resume_bit_exact(tmp_path):
    cfg = tiny_cfg(epochs=3, checkpoint_dir=str(tmp_path / "full"))
    full, hist = train(cfg)
    cfg2 = tiny_cfg(epochs=3, checkpoint_dir=str(tmp_path / "resumed"))
    resumed, hist2 = train(cfg2, resume_from=tmp_path / "full" / "epoch_002.cpw")
    a, b = full.named_parameters(), resumed.named_parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert hist2.val_loss == hist.val_loss
    # weights, Adam moments and manifest all match byte for byte
    assert (tmp_path / "full" / "epoch_003.cpw").read_bytes() == \
        (tmp_path / "resumed" / "epoch_003.cpw").read_bytes()


def test_train_deterministic():
    w1, h1 = train(tiny_cfg(epochs=1))
    w2, h2 = train(tiny_cfg(epochs=1))
    a, b = w1.named_parameters(), w2.named_parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert h1.val_loss == h2.val_loss


def test_train_divergence_names_epoch(monkeypatch):
    real = training.loss_and_grad
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        loss, g, p = real(*args)
        return (math.nan if calls["n"] > 2 else loss), g, p

    monkeypatch.setattr(training, "loss_and_grad", flaky)
    with pytest.raises(TrainingDivergedError) as exc:
        train(tiny_cfg(epochs=3))
    assert exc.value.epoch == 2
