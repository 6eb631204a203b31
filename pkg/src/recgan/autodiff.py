"""Dense 3D tensor ops with reverse-mode gradients, double backward and Adam.

Tensors are torch tensors in NCDHW layout; torch autograd records the graph.
This module fixes the padding/stride conventions the networks rely on, guards
the second-order path used by the gradient penalty, and owns optimizer state,
checkpoint I/O and the finite-difference gradient checker.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .grid import DimensionError


class CapabilityError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# precision and determinism

_DTYPES = {"single": torch.float32, "double": torch.float64}


def dtype_for(precision: str) -> torch.dtype:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be 'single' or 'double', got {precision!r}") from None


def deterministic(threads: int = 1) -> None:
    """Fix the intra-op thread count so reductions run in a fixed order."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# Activation patterns (ReLU signs, max-pool winners) are recorded here while a
# ``record_kinks`` block is active; the gradient checker uses them to reject
# finite-difference probes that straddle a kink.
_kinks: contextvars.ContextVar[list | None] = contextvars.ContextVar("_kinks", default=None)


@contextlib.contextmanager
def record_kinks():
    log: list = []
    token = _kinks.set(log)
    try:
        yield log
    finally:
        _kinks.reset(token)


def _note(pattern: torch.Tensor) -> None:
    log = _kinks.get()
    if log is not None:
        log.append(pattern.detach().clone())


# ---------------------------------------------------------------------------
# ops

def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _check5(x: torch.Tensor, name: str) -> None:
    if x.dim() != 5:
        raise DimensionError(f"{name} expects a 5-d NCDHW tensor, got shape {tuple(x.shape)}")


def conv3d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1) -> torch.Tensor:
    """Cross-correlation with TF-style ``same`` zero padding; kernel is (C_out, C_in, k, k, k)."""
    _check5(x, "conv3d")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv3d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    pads = []
    for axis in (4, 3, 2):  # F.pad takes the last axis first
        pads.extend(same_padding(x.shape[axis], kernel.shape[axis], stride))
    return F.conv3d(F.pad(x, pads), kernel, bias, stride=stride)


def conv3d_transpose(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 2) -> torch.Tensor:
    """Adjoint of :func:`conv3d` mapping spatial size n to stride*n; kernel is (C_in, C_out, k, k, k)."""
    _check5(x, "conv3d_transpose")
    if kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"conv3d_transpose: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    full = F.conv_transpose3d(x, kernel, None, stride=stride)
    index = [slice(None), slice(None)]
    for axis in (2, 3, 4):
        size = x.shape[axis] * stride
        before, _ = same_padding(size, kernel.shape[axis], stride)
        index.append(slice(before, before + size))
    out = full[tuple(index)]
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1, 1)
    return out


def maxpool3d(x: torch.Tensor) -> torch.Tensor:
    """2x2x2 max pooling at stride 2; ties go to the first element of the window."""
    _check5(x, "maxpool3d")
    if any(s % 2 for s in x.shape[2:]):
        raise DimensionError(f"maxpool3d needs even spatial dims, got {tuple(x.shape[2:])}")
    out, idx = F.max_pool3d(x, 2, 2, return_indices=True)
    _note(idx)
    return out


def dense(x: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.dim() != 2 or weights.dim() != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense: cannot apply {tuple(weights.shape)} weights to input {tuple(x.shape)}")
    out = x @ weights
    return out if bias is None else out + bias


def relu(x: torch.Tensor) -> torch.Tensor:
    _note(x > 0)
    return torch.relu(x)


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    _note(x > 0)
    return F.leaky_relu(x, slope)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def concat(tensors, axis: int) -> torch.Tensor:
    shapes = [tuple(t.shape) for t in tensors]
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref))
                                     if i != axis % len(ref)):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}")
    return torch.cat(list(tensors), dim=axis)


def reshape(x: torch.Tensor, shape) -> torch.Tensor:
    if math.prod(shape) != x.numel() and -1 not in shape:
        raise DimensionError(f"cannot reshape {tuple(x.shape)} to {tuple(shape)}")
    return x.reshape(shape)


def reduce_mean(x: torch.Tensor, axis=None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


# ---------------------------------------------------------------------------
# gradients

def backward(output: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar w.r.t. every parameter (zeros where unused)."""
    if output.numel() != 1:
        raise ValueError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not output.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(output.reshape(()), tensors, allow_unused=True)
    return {n: torch.zeros_like(t) if g is None else g
            for n, t, g in zip(names, tensors, grads)}


# graph nodes whose backward is itself differentiable by this module's contract
_SECOND_ORDER_OK = {
    "ConvolutionBackward0", "ReluBackward0", "LeakyReluBackward0", "SigmoidBackward0",
    "CatBackward0", "ViewBackward0", "ReshapeAliasBackward0", "UnsafeViewBackward0",
    "MeanBackward0", "MeanBackward1", "SumBackward0", "SumBackward1", "AddmmBackward0",
    "MmBackward0", "AddBackward0", "AddBackward1", "SubBackward0", "SubBackward1",
    "MulBackward0", "MulBackward1", "DivBackward0", "DivBackward1", "ConstantPadNdBackward0",
    "SliceBackward0", "ExpandBackward0", "TBackward0", "PermuteBackward0", "CloneBackward0",
    "UnsqueezeBackward0", "SqueezeBackward0", "SqueezeBackward1", "SelectBackward0",
    "AccumulateGrad",
}
_FRIENDLY = {
    "MaxPool3DWithIndicesBackward0": "maxpool3d",
    "ConvolutionBackward0": "conv3d",
}


def _path_ops(output: torch.Tensor, target: torch.Tensor) -> set[str]:
    """Names of graph nodes lying on some path from ``target`` to ``output``."""
    reaches: dict = {}
    stack = [(output.grad_fn, False)]
    while stack:
        node, expanded = stack.pop()
        if node is None or (node in reaches and not expanded):
            continue
        children = [c for c, _ in node.next_functions if c is not None]
        if not expanded:
            if getattr(node, "variable", None) is target:
                reaches[node] = True
                continue
            reaches[node] = False
            stack.append((node, True))
            stack.extend((c, False) for c in children if c not in reaches)
        else:
            reaches[node] = any(reaches.get(c, False) for c in children)
    return {type(n).__name__ for n, ok in reaches.items() if ok}


def input_gradient(output: torch.Tensor, inp: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar w.r.t. ``inp``, returned as a differentiable graph node."""
    if output.numel() != 1:
        raise ValueError("input_gradient needs a scalar output")
    if not inp.requires_grad:
        raise ValueError("input tensor does not require grad")
    if output.grad_fn is None:
        return torch.zeros_like(inp)
    bad = sorted(_path_ops(output, inp) - _SECOND_ORDER_OK)
    if bad:
        names = ", ".join(_FRIENDLY.get(b, b) for b in bad)
        raise CapabilityError(f"no second-order rule for: {names}")
    (g,) = torch.autograd.grad(output.reshape(()), inp, create_graph=True, allow_unused=True)
    return torch.zeros_like(inp) if g is None else g


def fd_input_gradient(fn: Callable[[torch.Tensor], torch.Tensor], inp: torch.Tensor,
                      h: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn`` at ``inp`` (cross-check oracle only)."""
    base = inp.detach().clone()
    flat = base.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn(base))
            flat[i] = orig - h
            fm = float(fn(base))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.view_as(inp)


# ---------------------------------------------------------------------------
# gradient checker

GRAD_FLOOR = 1e-6


def relative_error(a: float, b: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    skipped: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@torch.no_grad()
def _assign(flat: torch.Tensor, i: int, value: float) -> None:
    flat[i] = value


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               h: float = 1e-5, tolerance: float = 1e-4, samples: int | None = 4,
               seed: int = 0, max_tries: int = 50) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``samples`` coordinates per parameter are probed (all of them when None).
    Probes whose ±h evaluations change any ReLU sign or max-pool winner are
    rejected and redrawn.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check needs double precision, {name} is {p.dtype}")
    report = GradCheckReport(tolerance=tolerance)
    if not params:
        return report
    with record_kinks() as base_kinks:
        out = fn()
    analytic = backward(out, params)
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        flat = p.data.view(-1)
        gflat = analytic[name].reshape(-1)
        n = flat.numel()
        if samples is None or samples >= n:
            order = list(range(n))
            want = n
        else:
            order = list(rng.permutation(n)[:min(n, samples * max_tries)])
            want = samples
        worst, done = 0.0, 0
        for i in order:
            if done >= want:
                break
            orig = flat[i].item()
            # fn runs with grad enabled: it may itself differentiate (gradient penalty)
            with record_kinks() as kp:
                _assign(flat, i, orig + h)
                fp = fn().item()
            with record_kinks() as km:
                _assign(flat, i, orig - h)
                fm = fn().item()
            _assign(flat, i, orig)
            if not (_same_pattern(kp, base_kinks) and _same_pattern(km, base_kinks)):
                report.skipped += 1
                continue
            worst = max(worst, relative_error(float(gflat[i]), (fp - fm) / (2 * h)))
            done += 1
        report.errors[name] = worst
    return report


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, torch.Tensor], lr: float) -> "AdamState":
        return cls(lr=lr, m={k: torch.zeros_like(p) for k, p in params.items()},
                   v={k: torch.zeros_like(p) for k, p in params.items()})


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"adam_step: shape mismatch for {name}")
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# ---------------------------------------------------------------------------
# RGPW tensor files

_MAGIC = b"RGPW"
_VERSION = 1


def save_tensors(tensors: Mapping[str, torch.Tensor | np.ndarray], path: str | Path) -> None:
    """Write named f32 tensors atomically (temp file, then rename)."""
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<HI", _VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != _VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        pos, out = 10, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            n = math.prod(dims)
            if pos + 4 * n > len(raw):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims)
            out[name] = torch.from_numpy(arr.astype(np.float32))
            pos += 4 * n
    except struct.error:
        raise CheckpointFormatError(f"{path}: truncated file") from None
    return out


def blob_tensor(data: bytes) -> np.ndarray:
    """Encode bytes as an exact f32 vector so metadata can ride inside RGPW files."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.float32)


def tensor_blob(t: torch.Tensor) -> bytes:
    return bytes(t.to(torch.int64).tolist())
