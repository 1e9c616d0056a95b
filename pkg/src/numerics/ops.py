"""Checked tensor primitives.

Thin contracts over torch: every op validates shapes, refuses NaN inputs and
leaves differentiation to autograd. float64 is the default precision so that
oracle comparisons in the test suite can use tight tolerances.
"""
from typing import Literal, Sequence, Union

import torch
import torch.nn.functional as F

from utils.errors import GraphReuseError, NumericalError, ShapeError

DEFAULT_DTYPE = torch.float64

Number = Union[int, float]

_BACKWARD_DONE = "_stablemask_backward_done"


def _reject_nan(a: torch.Tensor, op: str) -> None:
    nans = torch.isnan(a)
    if nans.any():
        raise NumericalError(f"{op} received NaN input", {"nan_count": int(nans.sum())})


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis. -inf entries are legal and map to exactly 0."""
    if a.dim() < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    _reject_nan(a, "softmax_rows")
    row_max = a.amax(dim=-1, keepdim=True)
    if torch.isneginf(row_max).any():
        raise NumericalError(
            "softmax_rows got a fully masked row",
            {"masked_rows": int(torch.isneginf(row_max).sum())},
        )
    # torch.softmax subtracts the row max internally
    return torch.softmax(a, dim=-1)


def elementwise(a: torch.Tensor, b: torch.Tensor, kind: Literal["add", "mul", "sub"]) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise ShapeError(f"cannot combine {tuple(a.shape)} with {tuple(b.shape)}") from e

    if kind == "add":
        return a + b
    if kind == "mul":
        return a * b
    if kind == "sub":
        return a - b
    raise ValueError(f"unknown elementwise kind: {kind}")


def scale(a: torch.Tensor, c: Number) -> torch.Tensor:
    return a * c


def exp(a: torch.Tensor) -> torch.Tensor:
    _reject_nan(a, "exp")
    return torch.exp(a)


def log(a: torch.Tensor) -> torch.Tensor:
    """Natural log; log(0) = -inf is allowed, negative inputs are not."""
    _reject_nan(a, "log")
    if (a < 0).any():
        raise NumericalError("log of a negative value", {"negative_count": int((a < 0).sum())})
    return torch.log(a)


def neg(a: torch.Tensor) -> torch.Tensor:
    return -a


def rmsnorm(x: torch.Tensor, weight: torch.Tensor, eps: float) -> torch.Tensor:
    """x / sqrt(mean(x^2) + eps) * weight over the last axis."""
    if weight.dim() != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm weight {tuple(weight.shape)} does not match last dim of {tuple(x.shape)}")
    _reject_nan(x, "rmsnorm")
    return F.rms_norm(x, (x.shape[-1],), weight=weight, eps=eps)


def swiglu(
    x: torch.Tensor,
    w_gate: torch.Tensor,
    w_up: torch.Tensor,
    w_down: torch.Tensor,
) -> torch.Tensor:
    """down(silu(gate(x)) * up(x)); weights use the (out, in) layout of nn.Linear."""
    if w_gate.shape != w_up.shape:
        raise ShapeError(f"gate {tuple(w_gate.shape)} and up {tuple(w_up.shape)} projections differ")
    if w_gate.shape[1] != x.shape[-1] or w_down.shape[1] != w_gate.shape[0]:
        raise ShapeError(
            f"swiglu shapes inconsistent: x {tuple(x.shape)}, gate {tuple(w_gate.shape)}, down {tuple(w_down.shape)}"
        )
    return F.linear(F.silu(F.linear(x, w_gate)) * F.linear(x, w_up), w_down)


def backward(loss: torch.Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from a scalar loss.

    A loss may only be differentiated once; build a fresh loss to go again.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, _BACKWARD_DONE, False):
        raise GraphReuseError("backward called twice on the same loss without rebuilding it")
    loss.backward()
    setattr(loss, _BACKWARD_DONE, True)


def zero_grad(tensors: Sequence[torch.Tensor]) -> None:
    for t in tensors:
        t.grad = None
