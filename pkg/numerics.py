"""
Tensor helpers, gradient evaluation and the Adam update shared by every trainer.

Parameters are held in a ParameterVector: an ordered table of named float64
tensors with flat-index addressing. Reverse-mode gradients come from
torch.autograd; finite_diff_grad is the independent oracle used in tests.
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, Mapping, Tuple, Union

import torch
from pydantic import BaseModel, ConfigDict, Field

from handlers.errors import NumericError, ShapeError

DTYPE = torch.float64
DEFAULT_STD_EPS = 1e-5

# keeps d(sqrt)/d(var) finite on constant columns; far below any tolerance
_VAR_FLOOR = 1e-24


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"Non-finite values in {what}")
    return t


class ParameterVector:
    """Ordered named tensors; names are unique and the order is stable."""

    def __init__(self, entries: Union[Mapping[str, torch.Tensor], Iterable[Tuple[str, torch.Tensor]]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, tensor in items:
            if name in self._entries:
                raise ShapeError(f"Duplicate parameter name: {name}")
            self._entries[name] = tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParameterVector({shapes})"

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._entries.items()}

    @property
    def total_len(self) -> int:
        return sum(v.numel() for v in self._entries.values())

    def assert_same_layout(self, other: "ParameterVector", what: str = "parameters"):
        if self.shapes() != other.shapes() or self.names() != other.names():
            raise ShapeError(f"Layout mismatch in {what}: {self.shapes()} vs {other.shapes()}")

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParameterVector":
        return ParameterVector((k, fn(v)) for k, v in self._entries.items())

    def zip_map(self, other: "ParameterVector", fn) -> "ParameterVector":
        self.assert_same_layout(other)
        return ParameterVector((k, fn(v, other[k])) for k, v in self._entries.items())

    def select(self, prefix: str) -> "ParameterVector":
        return ParameterVector((k, v) for k, v in self._entries.items() if k.startswith(prefix))

    def merged(self, other: "ParameterVector") -> "ParameterVector":
        return ParameterVector(list(self._entries.items()) + list(other.items()))

    def clone(self) -> "ParameterVector":
        return self.map(lambda t: t.detach().clone())

    def zeros_like(self) -> "ParameterVector":
        return self.map(torch.zeros_like)

    def flatten(self) -> torch.Tensor:
        if not self._entries:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([v.detach().reshape(-1).to(DTYPE) for v in self._entries.values()])

    def unflatten(self, flat: torch.Tensor) -> "ParameterVector":
        if flat.numel() != self.total_len:
            raise ShapeError(f"Flat vector has {flat.numel()} values, expected {self.total_len}")
        out, offset = [], 0
        for k, v in self._entries.items():
            n = v.numel()
            out.append((k, flat[offset:offset + n].reshape(v.shape).to(v.dtype)))
            offset += n
        return ParameterVector(out)

    def locate(self, index: int) -> Tuple[str, int]:
        """Map a flat index to (entry name, offset inside that entry)."""
        if index < 0 or index >= self.total_len:
            raise IndexError(index)
        for k, v in self._entries.items():
            if index < v.numel():
                return k, index
            index -= v.numel()
        raise IndexError(index)

    def equal(self, other: "ParameterVector") -> bool:
        if self.names() != other.names():
            return False
        return all(
            v.dtype == other[k].dtype and v.shape == other[k].shape and torch.equal(v, other[k])
            for k, v in self._entries.items()
        )


def _require_rank2(z: torch.Tensor, op: str):
    if z.dim() != 2:
        raise ShapeError(f"{op} expects a B x D tensor, got shape {tuple(z.shape)}")


def mean_center(z: torch.Tensor) -> torch.Tensor:
    _require_rank2(z, "mean_center")
    return z - z.mean(dim=0, keepdim=True)


def standardize_columns(z: torch.Tensor, eps: float = DEFAULT_STD_EPS) -> torch.Tensor:
    """Center each column and divide by (population std + eps)."""
    _require_rank2(z, "standardize_columns")
    if z.shape[0] < 2:
        raise ShapeError(f"standardize_columns needs at least 2 rows, got {z.shape[0]}")
    check_finite(z, "standardize_columns input")
    centered = mean_center(z)
    std = torch.sqrt((centered * centered).mean(dim=0, keepdim=True) + _VAR_FLOOR)
    return centered / (std + eps)


def value_and_grad(loss_fn: Callable, params: ParameterVector, has_aux: bool = False):
    """
    Evaluate ``loss_fn(params)`` and its exact gradient in float64.

    ``loss_fn`` receives a ParameterVector of leaf tensors and returns a scalar
    tensor, or ``(scalar, aux)`` when ``has_aux`` is set. Unused parameters get
    zero gradients.

    Returns ``(loss, grads)`` or ``(loss, grads, aux)``.
    """
    leaves = params.map(lambda t: t.detach().to(DTYPE).requires_grad_(True))
    out = loss_fn(leaves)
    loss, aux = out if has_aux else (out, None)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss, dtype=DTYPE)
    if loss.numel() != 1:
        raise ShapeError(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")

    tensors = list(leaves.values())
    if loss.requires_grad and tensors:
        grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)

    grad_vec = ParameterVector(
        (name, torch.zeros_like(leaf).detach() if g is None else g.detach())
        for (name, leaf), g in zip(leaves.items(), grads)
    )
    for name, g in grad_vec.items():
        check_finite(g, f"gradient of {name}")

    value = float(loss.detach().reshape(()))
    if has_aux:
        return value, grad_vec, _detach_aux(aux)
    return value, grad_vec


def _detach_aux(aux):
    if torch.is_tensor(aux):
        return float(aux.detach()) if aux.numel() == 1 else aux.detach()
    if isinstance(aux, dict):
        return {k: _detach_aux(v) for k, v in aux.items()}
    if isinstance(aux, tuple) and hasattr(aux, "_fields"):
        return type(aux)(*(_detach_aux(v) for v in aux))
    return aux


def finite_diff_grad(loss_fn: Callable, params: ParameterVector, h: float = 1e-3) -> ParameterVector:
    """Central differences (f(θ+h e_i) − f(θ−h e_i)) / 2h, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    base = params.flatten()
    grad = torch.zeros_like(base)

    def evaluate(flat):
        with torch.no_grad():
            out = loss_fn(params.unflatten(flat))
            if isinstance(out, tuple):
                out = out[0]
            return float(torch.as_tensor(out, dtype=DTYPE).reshape(()))

    for i in range(base.numel()):
        plus = base.clone()
        plus[i] += h
        minus = base.clone()
        minus[i] -= h
        grad[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
    return params.unflatten(grad)


def max_relative_error(a: ParameterVector, b: ParameterVector) -> float:
    """Largest absolute difference, scaled by the largest gradient magnitude."""
    fa, fb = a.flatten(), b.flatten()
    if fa.numel() == 0:
        return 0.0
    scale = max(float(fa.abs().max()), float(fb.abs().max()), 1e-12)
    return float((fa - fb).abs().max()) / scale


class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


@dataclass
class AdamState:
    m: ParameterVector
    v: ParameterVector
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float

    @property
    def hyper(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def init_adam(params: ParameterVector, cfg: AdamConfig = AdamConfig()) -> AdamState:
    zeros = params.map(lambda t: torch.zeros_like(t, dtype=DTYPE))
    return AdamState(m=zeros, v=zeros.clone(), step_count=0,
                     lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def adam_step(state: AdamState, params: ParameterVector, grads: ParameterVector) -> Tuple[AdamState, ParameterVector]:
    """One bias-corrected Adam update; inputs are left untouched."""
    params.assert_same_layout(grads, "adam_step gradients")
    params.assert_same_layout(state.m, "adam_step moments")

    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    m = state.m.zip_map(grads, lambda m_, g: state.beta1 * m_ + (1.0 - state.beta1) * g.to(DTYPE))
    v = state.v.zip_map(grads, lambda v_, g: state.beta2 * v_ + (1.0 - state.beta2) * (g.to(DTYPE) * g.to(DTYPE)))

    new_params = ParameterVector(
        (k, (p.detach().to(DTYPE) - state.lr * (m[k] / bc1) / (torch.sqrt(v[k] / bc2) + state.eps)).to(p.dtype))
        for k, p in params.items()
    )
    new_state = AdamState(m=m, v=v, step_count=t, lr=state.lr,
                          beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_state, new_params
