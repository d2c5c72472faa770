"""Differentiation contract: a gradient tape over torch autograd, a central
finite-difference oracle, and a functional Adam update.
"""

import dataclasses
import typing as ty

import numpy as np
import torch

from .errors import InvalidArgumentError
from .model import DTYPE, CoefficientVector


class GradientTape:
    """Records computations on bound inputs and returns exact reverse-mode gradients.

    Usage::

        with GradientTape() as tape:
            c = tape.watch("coeffs", coeffs)
            loss = regularization_loss(c, weights)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._bindings: ty.Dict[str, torch.Tensor] = {}
        self._grad_mode: ty.Optional[torch.enable_grad] = None

    def __enter__(self) -> "GradientTape":
        self._grad_mode = torch.enable_grad()
        self._grad_mode.__enter__()
        return self

    def __exit__(self, *exc) -> None:
        if self._grad_mode is not None:
            self._grad_mode.__exit__(*exc)
            self._grad_mode = None

    def watch(self, name: str, value) -> torch.Tensor:
        """Bind ``value`` under ``name``; returns the tensor to compute with.

        A leaf tensor that already requires grad (a module parameter) is bound
        as-is; anything else is copied into a fresh float64 leaf.
        """
        if name in self._bindings:
            raise InvalidArgumentError(f"Input '{name}' is already bound on this tape")
        if isinstance(value, torch.Tensor) and value.is_leaf and value.requires_grad:
            leaf = value
        else:
            if isinstance(value, CoefficientVector):
                value = value.values
            if isinstance(value, torch.Tensor):
                value = value.detach()
            leaf = torch.tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)
            leaf.requires_grad_(True)
        self._bindings[name] = leaf
        return leaf

    def watch_module(self, prefix: str, module: torch.nn.Module) -> None:
        for name, parameter in module.named_parameters():
            self.watch(f"{prefix}.{name}", parameter)

    @property
    def bindings(self) -> ty.Mapping[str, torch.Tensor]:
        return dict(self._bindings)


def backward(
    tape: GradientTape, output: torch.Tensor, retain_graph: bool = False
) -> ty.Dict[str, torch.Tensor]:
    """Gradients of scalar ``output`` with respect to every input bound on ``tape``.

    Inputs the output does not depend on get exact zeros.
    """
    if not isinstance(output, torch.Tensor) or output.numel() != 1:
        raise InvalidArgumentError("backward needs a scalar tensor output")
    if not output.requires_grad:
        raise InvalidArgumentError("output was not computed from any input on this tape")
    names = list(tape.bindings)
    inputs = [tape.bindings[name] for name in names]
    grads = torch.autograd.grad(
        output.reshape(()), inputs, allow_unused=True, retain_graph=retain_graph
    )
    return {
        name: (torch.zeros_like(leaf) if grad is None else grad)
        for name, leaf, grad in zip(names, inputs, grads)
    }


def finite_difference(
    loss_fn: ty.Callable[[ty.Any], ty.Any],
    coeffs,
    h: float = 1e-4,
    indices: ty.Optional[ty.Iterable[int]] = None,
) -> np.ndarray:
    """Central-difference gradient estimate ``(f(x + h e_i) - f(x - h e_i)) / 2h``.

    When ``indices`` is given only those coordinates are estimated; the rest of
    the returned vector is zero.
    """
    if not h > 0:
        raise InvalidArgumentError(f"h must be positive, got {h}")
    wrap = CoefficientVector if isinstance(coeffs, CoefficientVector) else (lambda x: x)
    base = np.array(coeffs, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size) if indices is None else indices:
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus = float(loss_fn(wrap(plus.reshape(base.shape))))
        f_minus = float(loss_fn(wrap(minus.reshape(base.shape))))
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(base.shape)


@dataclasses.dataclass
class AdamState:
    """Moment accumulators and hyperparameters of one Adam optimizer."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: ty.List[torch.Tensor] = dataclasses.field(default_factory=list)
    v: ty.List[torch.Tensor] = dataclasses.field(default_factory=list)


def adam_step(
    state: AdamState,
    params: ty.Sequence[torch.Tensor],
    gradients: ty.Sequence[torch.Tensor],
) -> ty.Tuple[ty.List[torch.Tensor], AdamState]:
    """One bias-corrected Adam update; returns detached new parameters and ``state``."""
    if len(params) != len(gradients):
        raise InvalidArgumentError(
            f"{len(params)} parameters but {len(gradients)} gradients"
        )
    for p, g in zip(params, gradients):
        if p.shape != g.shape:
            raise InvalidArgumentError(
                f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}"
            )
    if not state.m:
        state.m = [torch.zeros_like(p, dtype=p.dtype).detach() for p in params]
        state.v = [torch.zeros_like(p, dtype=p.dtype).detach() for p in params]
    elif [tuple(m.shape) for m in state.m] != [tuple(p.shape) for p in params]:
        raise InvalidArgumentError("parameter shapes changed between Adam steps")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = []
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, gradients)):
            g = g.detach()
            state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
            state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
            m_hat = state.m[i] / correction1
            v_hat = state.v[i] / correction2
            updated.append(p.detach() - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps))
    return updated, state


def adam_update_module(
    state: AdamState, module: torch.nn.Module, gradients: ty.Sequence[torch.Tensor]
) -> None:
    """Apply :func:`adam_step` to a module's parameters in place."""
    params = list(module.parameters())
    updated, _ = adam_step(state, params, gradients)
    with torch.no_grad():
        for p, new in zip(params, updated):
            p.copy_(new)
