import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import conv3d_loop, dense_loop
from recgan import autodiff as ad
from recgan.grid import DimensionError

D = torch.float64


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def param(*shape, seed=0):
    return rand(*shape, seed=seed).requires_grad_()


# ---------------------------------------------------------------------------
# forward semantics

def test_conv_matches_loop_oracle():
    x, w = rand(1, 2, 6, 6, 6, seed=1), rand(3, 2, 3, 3, 3, seed=2)
    ours = ad.conv3d(x, w).numpy()
    assert np.abs(ours - conv3d_loop(x.numpy(), w.numpy())).max() < 1e-12


def test_strided_conv_matches_loop_oracle():
    x, w = rand(1, 1, 5, 5, 5, seed=3), rand(2, 1, 4, 4, 4, seed=4)
    ours = ad.conv3d(x, w, stride=2).numpy()
    assert ours.shape == (1, 2, 3, 3, 3)
    assert np.abs(ours - conv3d_loop(x.numpy(), w.numpy(), stride=2)).max() < 1e-12


def test_conv_trivial_cases():
    x = torch.zeros(1, 2, 4, 4, 4, dtype=D)
    w, b = rand(3, 2, 4, 4, 4), rand(3)
    assert not ad.conv3d(x, w).any()
    assert torch.allclose(ad.conv3d(x, w, b), b.view(1, 3, 1, 1, 1).expand(1, 3, 4, 4, 4))
    v, k = torch.tensor(3.0, dtype=D), torch.tensor(-2.0, dtype=D)
    assert ad.conv3d(v.view(1, 1, 1, 1, 1), k.view(1, 1, 1, 1, 1)).item() == -6.0
    with pytest.raises(DimensionError):
        ad.conv3d(x, rand(3, 5, 4, 4, 4))


@given(st.integers(0, 10_000), st.sampled_from([(1, 2), (2, 4), (3, 4)]), st.integers(1, 3))
def test_transpose_is_adjoint(seed, sizes, channels):
    n, k = sizes
    rng = np.random.default_rng(seed)
    y = torch.from_numpy(rng.normal(size=(1, channels, 2 * n, 2 * n, 2 * n)))
    kern = torch.from_numpy(rng.normal(size=(2, channels, k, k, k)))
    x = torch.from_numpy(rng.normal(size=(1, 2, n, n, n)))
    lhs = (ad.conv3d(y, kern, stride=2) * x).sum().item()
    rhs = (y * ad.conv3d_transpose(x, kern, stride=2)).sum().item()
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_transpose_shape_and_zero():
    x = torch.zeros(1, 3, 2, 2, 2, dtype=D)
    out = ad.conv3d_transpose(x, rand(3, 5, 4, 4, 4))
    assert out.shape == (1, 5, 4, 4, 4) and not out.any()
    with pytest.raises(DimensionError):
        ad.conv3d_transpose(x, rand(4, 5, 4, 4, 4))


def test_maxpool_examples():
    assert torch.equal(ad.maxpool3d(torch.full((1, 1, 4, 4, 4), 2.5)), torch.full((1, 1, 2, 2, 2), 2.5))
    block = torch.arange(8, dtype=D).view(1, 1, 2, 2, 2)
    assert ad.maxpool3d(block).item() == 7
    with pytest.raises(DimensionError):
        ad.maxpool3d(torch.zeros(1, 1, 3, 4, 4))


def test_maxpool_tie_routes_to_first():
    x = torch.ones(1, 1, 2, 2, 2, dtype=D, requires_grad=True)
    (g,) = torch.autograd.grad(ad.maxpool3d(x).sum(), x)
    expected = torch.zeros_like(x)
    expected.view(-1)[0] = 1
    assert torch.equal(g, expected)


def test_dense_examples_and_oracle():
    x, b = rand(3, 4, seed=1), rand(4, seed=2)
    assert torch.allclose(ad.dense(x, torch.eye(4, dtype=D), b), x + b)
    assert torch.allclose(ad.dense(x, torch.zeros(4, 4, dtype=D), b), b.expand(3, 4))
    w, b2 = rand(4, 2, seed=3), rand(2, seed=4)
    assert np.abs(ad.dense(x, w, b2).numpy() - dense_loop(x.numpy(), w.numpy(), b2.numpy())).max() < 1e-12
    with pytest.raises(DimensionError):
        ad.dense(x, rand(3, 2))


def test_activation_examples():
    assert ad.leaky_relu(torch.tensor(-1.0, dtype=D), 0.2).item() == pytest.approx(-0.2)
    assert ad.sigmoid(torch.tensor(0.0)).item() == 0.5
    s = ad.sigmoid(rand(100) * 10)
    assert ((s > 0) & (s < 1)).all()
    assert ad.relu(torch.tensor([-1.0, 2.0])).tolist() == [0.0, 2.0]


def test_shape_ops():
    assert ad.reduce_mean(torch.tensor([1.0, 2, 3, 4])).item() == 2.5
    x = rand(2, 3, 4)
    assert torch.equal(ad.reshape(ad.reshape(x, (6, 4)), (2, 3, 4)), x)
    with pytest.raises(DimensionError):
        ad.reshape(x, (5, 5))
    with pytest.raises(DimensionError):
        ad.concat([rand(2, 3), rand(3, 3)], axis=1)


def test_concat_gradient_splits_upstream():
    a, b = param(2, 3, seed=1), param(2, 5, seed=2)
    up = rand(2, 8, seed=3)
    ga, gb = torch.autograd.grad((ad.concat([a, b], axis=1) * up).sum(), [a, b])
    assert torch.equal(ga, up[:, :3]) and torch.equal(gb, up[:, 3:])


# ---------------------------------------------------------------------------
# backward and gradient checks

def test_backward_examples():
    x = param(3, 4)
    g = ad.backward((x ** 2).sum(), {"x": x, "unused": param(2)})
    assert torch.allclose(g["x"], 2 * x.detach())
    assert not g["unused"].any()
    const = ad.backward(torch.tensor(3.0, dtype=D), {"x": x})
    assert not const["x"].any()
    with pytest.raises(ValueError):
        ad.backward(x * 2, {"x": x})


def _away_from_kinks(t, margin=1e-3):
    with torch.no_grad():
        t[t.abs() < margin] = margin * 2
    return t


@pytest.mark.parametrize("op", ["relu", "leaky_relu", "sigmoid"])
def test_activation_grad_checks(op):
    x = param(4, 5, seed=4)
    _away_from_kinks(x)
    fn = getattr(ad, op)
    rep = ad.grad_check(lambda: (fn(x) * rand(4, 5, seed=9)).sum(), {"x": x}, samples=None)
    assert rep.max_error < 1e-6


def test_maxpool_grad_check():
    x = param(1, 1, 4, 4, 4, seed=5)
    rep = ad.grad_check(lambda: (ad.maxpool3d(x) * rand(1, 1, 2, 2, 2, seed=6)).sum(), {"x": x},
                        samples=None)
    assert rep.max_error < 1e-6


def test_linear_op_grad_checks():
    x, w, b = param(1, 2, 4, 4, 4, seed=1), param(3, 2, 4, 4, 4, seed=2), param(3, seed=3)
    up = rand(1, 3, 2, 2, 2, seed=4)
    rep = ad.grad_check(lambda: (ad.conv3d(x, w, b, stride=2) * up).sum(), {"x": x, "w": w, "b": b})
    assert rep.passed
    wt, bt = param(3, 2, 4, 4, 4, seed=5), param(2, seed=6)
    xt = param(1, 3, 2, 2, 2, seed=7)
    up2 = rand(1, 2, 4, 4, 4, seed=8)
    rep = ad.grad_check(lambda: (ad.conv3d_transpose(xt, wt, bt) * up2).sum(),
                        {"x": xt, "w": wt, "b": bt})
    assert rep.passed
    xd, wd, bd = param(3, 4, seed=9), param(4, 2, seed=10), param(2, seed=11)
    rep = ad.grad_check(lambda: (ad.dense(xd, wd, bd) ** 2).sum(), {"x": xd, "w": wd, "b": bd},
                        samples=None)
    assert rep.passed


def test_composite_conv_relu_mean():
    x, w = param(1, 1, 4, 4, 4, seed=1), param(2, 1, 4, 4, 4, seed=2)
    rep = ad.grad_check(lambda: ad.reduce_mean(ad.relu(ad.conv3d(x, w))), {"x": x, "w": w},
                        h=1e-5, samples=8)
    assert rep.passed and rep.tolerance == 1e-4


class _Scaled(torch.autograd.Function):
    """Identity whose gradient is off by 1%."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 1.01 * g


def test_grad_check_catches_one_percent_error():
    x = param(3, 3)
    rep = ad.grad_check(lambda: (_Scaled.apply(x) ** 2).sum(), {"x": x})
    assert not rep.passed and rep.max_error > 5e-3


def test_grad_check_edge_cases():
    rep = ad.grad_check(lambda: torch.tensor(1.0, dtype=D), {})
    assert rep.errors == {} and rep.passed
    with pytest.raises(ValueError):
        ad.grad_check(lambda: torch.zeros(()), {"x": torch.zeros(2, requires_grad=True)})


# ---------------------------------------------------------------------------
# second order

def test_input_gradient_linear_and_constant():
    w = param(2, 3, seed=1)
    y = param(2, 3, seed=2)
    g = ad.input_gradient((w * y).sum(), y)
    assert torch.allclose(g, w.detach())
    norm = torch.linalg.vector_norm(g)
    (dw,) = torch.autograd.grad(norm, w)
    assert torch.allclose(dw, w.detach() / w.detach().norm())
    assert not ad.input_gradient((w ** 2).sum(), y).any()


def test_input_gradient_rejects_maxpool():
    y = param(1, 1, 4, 4, 4)
    with pytest.raises(ad.CapabilityError, match="maxpool3d"):
        ad.input_gradient(ad.maxpool3d(y).sum(), y)


def _tiny_disc(y, w1, b1, w2, b2):
    h = ad.relu(ad.conv3d(y, w1, b1, stride=2))
    return ad.reduce_mean(ad.sigmoid(ad.conv3d(h, w2, b2, stride=2)))


def gp_loss(params, y_hat, lam=10.0):
    y = y_hat.detach().requires_grad_()
    g = ad.input_gradient(_tiny_disc(y, *params), y)
    return lam * (torch.linalg.vector_norm(g) - 1) ** 2


def test_input_gradient_matches_fd_oracle():
    params = [param(2, 1, 4, 4, 4, seed=1), param(2, seed=2),
              param(3, 2, 4, 4, 4, seed=3), param(3, seed=4)]
    y = rand(1, 1, 4, 4, 4, seed=5).requires_grad_()
    g = ad.input_gradient(_tiny_disc(y, *params), y)
    fd = ad.fd_input_gradient(lambda t: _tiny_disc(t, *params), y, h=1e-6)
    assert torch.allclose(g, fd, atol=1e-8, rtol=1e-5)


def test_gradient_penalty_second_order():
    names = ["w1", "b1", "w2", "b2"]
    shapes = [(2, 1, 4, 4, 4), (2,), (3, 2, 4, 4, 4), (3,)]
    params = {n: param(*s, seed=i) * 0.5 for i, (n, s) in enumerate(zip(names, shapes))}
    params = {n: p.detach().requires_grad_() for n, p in params.items()}
    y_hat = rand(1, 1, 4, 4, 4, seed=9)
    rep = ad.grad_check(lambda: gp_loss(list(params.values()), y_hat), params,
                        h=1e-4, tolerance=1e-3, samples=6)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_grads_leave_params():
    p = {"a": rand(3, 3)}
    before = p["a"].clone()
    st_ = ad.AdamState.for_params(p, lr=0.1)
    ad.adam_step(p, {"a": torch.zeros(3, 3, dtype=D)}, st_)
    assert torch.equal(p["a"], before)


def test_adam_first_step_magnitude():
    p = {"a": torch.tensor([1.0], dtype=D)}
    st_ = ad.AdamState.for_params(p, lr=1e-3)
    ad.adam_step(p, {"a": torch.tensor([2.5], dtype=D)}, st_)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert p["a"].item() == pytest.approx(1.0 - 1e-3 * 2.5 / (2.5 + 1e-8), abs=1e-15)


def test_adam_matches_torch_optim():
    rng = np.random.default_rng(0)
    ours = {"w": torch.from_numpy(rng.normal(size=(4, 3)))}
    ref = ours["w"].clone().requires_grad_()
    opt = torch.optim.Adam([ref], lr=5e-3, betas=(0.9, 0.999), eps=1e-8)
    state = ad.AdamState.for_params(ours, lr=5e-3)
    for _ in range(20):
        g = torch.from_numpy(rng.normal(size=(4, 3)))
        ad.adam_step(ours, {"w": g}, state)
        opt.zero_grad()
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(ours["w"], ref.detach(), atol=1e-12)


def test_adam_deterministic():
    def run():
        p = {"w": rand(5)}
        s = ad.AdamState.for_params(p, lr=0.01)
        for k in range(5):
            ad.adam_step(p, {"w": rand(5, seed=k + 1)}, s)
        return p["w"]

    assert torch.equal(run(), run())


# ---------------------------------------------------------------------------
# tensor files

def test_rgpw_round_trip_and_layout(tmp_path):
    tensors = {"a.w": torch.randn(2, 3, 4), "b": torch.arange(5, dtype=torch.float32)}
    path = tmp_path / "t.rgpw"
    ad.save_tensors(tensors, path)
    raw = path.read_bytes()
    assert raw[:4] == b"RGPW" and struct.unpack_from("<HI", raw, 4) == (1, 2)
    (nlen,) = struct.unpack_from("<H", raw, 10)
    assert raw[12:12 + nlen] == b"a.w"
    back = ad.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])
    assert not list(tmp_path.glob("*.tmp"))


def test_rgpw_errors(tmp_path):
    path = tmp_path / "t.rgpw"
    ad.save_tensors({"x": torch.ones(10)}, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ad.CheckpointFormatError):
        ad.load_tensors(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ad.CheckpointFormatError):
        ad.load_tensors(path)


def test_blob_round_trip():
    data = "ω json {\"a\": 1}".encode()
    assert ad.tensor_blob(torch.from_numpy(ad.blob_tensor(data))) == data


def test_dtype_for():
    assert ad.dtype_for("double") is torch.float64
    with pytest.raises(ValueError):
        ad.dtype_for("half")


def test_same_padding_matches_ceil_rule():
    for size in range(1, 12):
        for s in (1, 2):
            lo, hi = ad.same_padding(size, 4, s)
            assert (size + lo + hi - 4) // s + 1 == math.ceil(size / s)
