import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from swit import nn_core as nc
from swit.errors import CheckpointError, InvalidArgument, NumericError, ShapeMismatch

D64 = torch.float64


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=D64)


def check(f, params, tol=1e-4):
    report = nc.grad_check(f, params, tol=tol, step=1e-5)
    assert report.passed, report
    return report


# --- primitives --------------------------------------------------------------------


def test_softmax_constant_row_uniform():
    out = nc.softmax(torch.full((2, 7), 3.3, dtype=D64))
    torch.testing.assert_close(out, torch.full((2, 7), 1 / 7, dtype=D64))


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50))
def test_softmax_shift_invariant(c):
    x = rand(3, 6)
    assert torch.max(torch.abs(nc.softmax(x + c) - nc.softmax(x))) < 1e-12


def test_layer_norm_constant_row_zero():
    out = nc.layer_norm(torch.full((1, 5), 2.0, dtype=D64), gain=1.0, eps=1e-4)
    assert torch.all(out == 0)


def test_layer_norm_moments():
    x = rand(20, 16) * 3 + 1
    out = nc.layer_norm(x, gain=1.0, eps=0.0)
    assert out.mean(-1).abs().max() < 1e-9
    assert (out.var(-1, unbiased=False) - 1).abs().max() < 1e-6
    # with the variance epsilon the output variance shrinks to v / (v + eps)
    eps = 1e-4
    v = x.var(-1, unbiased=False)
    shrunk = nc.layer_norm(x, gain=1.0, eps=eps).var(-1, unbiased=False)
    torch.testing.assert_close(shrunk, v / (v + eps), rtol=1e-10, atol=0)
    torch.testing.assert_close(nc.layer_norm(x, gain=2.0, eps=eps), 2 * nc.layer_norm(x, 1.0, eps))


def test_gelu_values():
    assert nc.gelu(torch.zeros(1, dtype=D64)).item() == 0.0
    x = torch.linspace(-4, 4, 41, dtype=D64)
    tanh_form = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    torch.testing.assert_close(nc.gelu(x), tanh_form, rtol=1e-12, atol=1e-12)


def test_check_finite():
    nc.check_finite(torch.ones(3), "ok")
    with pytest.raises(NumericError, match="log"):
        nc.check_finite(torch.log(torch.tensor([-1.0])), "log")


def test_dense_width_mismatch():
    layer = nc.Dense(4, 3)
    with pytest.raises(ShapeMismatch):
        layer(torch.ones(2, 5))
    with pytest.raises(InvalidArgument):
        layer(torch.ones(2, 5))


# --- gradients ----------------------------------------------------------------------


def test_sum_of_squares_gradient():
    theta = rand(5).requires_grad_()
    (theta**2).sum().backward()
    torch.testing.assert_close(theta.grad, 2 * theta.detach())


def test_stop_gradient():
    x = rand(4).requires_grad_()
    y = nc.stop_gradient(x)
    assert torch.equal(y, x.detach())
    (nc.stop_gradient(x) * x).sum().backward()
    torch.testing.assert_close(x.grad, x.detach())
    x.grad = None
    out = nc.stop_gradient(x).sum() * 3
    assert not out.requires_grad


@pytest.mark.parametrize(
    "name,fn",
    [
        ("matmul", lambda a, b: (a @ b).sin().sum()),
        ("add_mul", lambda a, b: ((a + 1.5) * a).sum() + (b * b).mean()),
        ("transpose_concat", lambda a, b: torch.cat([a.T, b], dim=1).pow(2).sum()),
        ("slice_mean", lambda a, b: a[1:3].mean() * b[:, 2].sum()),
        ("exp_log", lambda a, b: torch.exp(a * 0.3).sum() + torch.log(b.abs() + 1).sum()),
        ("softmax", lambda a, b: (nc.softmax(a) * b[:3, :4]).sum()),
        ("gelu", lambda a, b: nc.gelu(a).pow(2).sum()),
        ("layer_norm", lambda a, b: (nc.layer_norm(a, 1.0, 1e-4) * b[:3, :4]).sum()),
    ],
)
def test_primitive_gradients(name, fn):
    a = rand(3, 4, seed=1).requires_grad_()
    b = rand(4, 5, seed=2).requires_grad_()
    check(lambda: fn(a, b), [a, b])


def test_matmul_chain_tight():
    a, b, c = (rand(3, 3, seed=s).requires_grad_() for s in range(3))
    report = check(lambda: (a @ b @ c).sum(), [a, b, c], tol=1e-6)
    assert report.max_rel_error < 1e-6


def test_dense_layer_gradient():
    torch.manual_seed(0)
    layer = nc.Dense(5, 3).double()
    x = rand(4, 5)
    check(lambda: nc.gelu(layer(x)).sum(), list(layer.parameters()))


def test_grad_check_linear_is_exact():
    w = rand(6).requires_grad_()
    x = rand(6, seed=3)
    assert nc.grad_check(lambda: (w * x).sum(), [w]).max_rel_error < 1e-9


class _BadSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x**2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # should be 2x


def test_grad_check_catches_corrupted_adjoint():
    x = rand(4).requires_grad_()
    report = nc.grad_check(lambda: _BadSquare.apply(x).sum(), [x])
    assert not report.passed


def test_grad_check_rejects_non_scalar():
    x = rand(3).requires_grad_()
    with pytest.raises(InvalidArgument):
        nc.grad_check(lambda: x * 2, [x])


def test_unused_parameter_gets_zero():
    x = rand(3).requires_grad_()
    unused = rand(2).requires_grad_()
    report = nc.grad_check(lambda: (x**2).sum(), [x, unused])
    assert report.passed


# --- optimizer ------------------------------------------------------------------------


def test_adamw_zero_grad():
    p = torch.tensor([1.0, -2.0], dtype=D64)
    out = nc.adamw_step([p], [torch.zeros(2, dtype=D64)], {}, lr=0.1, weight_decay=0.0)
    torch.testing.assert_close(out[0], p)
    out = nc.adamw_step([p], [torch.zeros(2, dtype=D64)], {}, lr=0.1, weight_decay=0.5)
    torch.testing.assert_close(out[0], p * (1 - 0.1 * 0.5))


def test_adamw_first_step_is_minus_lr():
    # m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    p = torch.tensor([0.5], dtype=D64)
    out = nc.adamw_step([p], [torch.ones(1, dtype=D64)], {}, lr=1e-3)
    assert out[0].item() == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adamw_class_matches_functional():
    rng = np.random.default_rng(0)
    p = torch.tensor(rng.standard_normal(5))
    q = p.clone()
    opt = nc.AdamW({"p": p})
    state = {}
    for t in range(6):
        g = torch.tensor(rng.standard_normal(5))
        p.grad = g.clone()
        opt.step(lr=0.01, weight_decay=0.1)
        (q,) = nc.adamw_step([q], [g], state, lr=0.01, weight_decay=0.1)
    torch.testing.assert_close(p, q, rtol=1e-12, atol=1e-14)


def test_adamw_no_decay_and_determinism():
    def run():
        p = torch.ones(3, dtype=D64)
        b = torch.ones(3, dtype=D64)
        opt = nc.AdamW({"p": p, "b": b}, no_decay=["b"])
        opt.step(lr=0.1, weight_decay=0.5)
        return p, b

    p1, b1 = run()
    p2, _ = run()
    torch.testing.assert_close(p1, torch.full((3,), 0.95, dtype=D64))
    torch.testing.assert_close(b1, torch.ones(3, dtype=D64))
    assert torch.equal(p1, p2)


# --- schedules and clipping -----------------------------------------------------------------


def test_cosine_schedule_points():
    assert nc.cosine_schedule(10, 100, 1.0, 0.1, warmup_steps=10) == 1.0
    assert nc.cosine_schedule(100, 100, 1.0, 0.1, warmup_steps=10) == pytest.approx(0.1, abs=1e-15)
    assert nc.cosine_schedule(55, 100, 1.0, 0.1, warmup_steps=10) == pytest.approx(0.55, abs=1e-15)
    assert nc.cosine_schedule(5, 100, 1.0, 0.1, warmup_steps=10) == pytest.approx(0.5)
    assert nc.cosine_schedule(0, 100, 1.0, 0.1, warmup_steps=10) == 0.0


@pytest.mark.parametrize("norm,scale", [(1.0, 1.0), (6.0, 0.5), (0.0, 1.0)])
def test_clip_gradients(norm, scale):
    g = rand(10)
    g = g / g.norm() * norm if norm else torch.zeros(10, dtype=D64)
    p = torch.zeros(10, dtype=D64, requires_grad=True)
    p.grad = g.clone()
    before = nc.clip_gradients([p], 3.0)
    assert before == pytest.approx(norm)
    torch.testing.assert_close(p.grad, g * scale)
    assert p.grad.norm().item() <= 3.0 + 1e-9


# --- checkpoints ------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a/w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.float32(2.5), "c": np.zeros((0, 4))}
    path = tmp_path / "x.ckpt"
    nc.save_arrays(path, arrays)
    back = nc.load_arrays(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == np.asarray(arrays[k], np.float32).tobytes()
        assert back[k].shape == np.asarray(arrays[k]).shape
    nc.save_arrays(tmp_path / "y.ckpt", back)
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.ckpt"
    nc.save_arrays(path, {"w": np.ones((3, 3), np.float32)})
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        nc.load_arrays(bad)
    bad.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        nc.load_arrays(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        nc.load_arrays(bad)


def test_module_arrays_shape_check(tmp_path):
    a = nc.Dense(3, 2)
    b = nc.Dense(3, 4)
    with pytest.raises(ShapeMismatch):
        nc.load_module_arrays(b, {k: v.detach().numpy() for k, v in nc.module_arrays(a, "m").items()}, "m")
