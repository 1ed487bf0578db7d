"""Numeric foundation for the denoiser and trainer.

Dense arrays, arithmetic, convolution, and reverse-mode gradients are
delegated to torch (CPU); this module pins down the contracts the rest of
the package relies on and supplies the independent verification tools:

* ``Graph`` + ``evaluate_with_gradients`` -- a recorded computation from a
  parameter set to a scalar loss, with one gradient per parameter and
  strict finiteness checking.
* ``finite_difference_gradients`` / ``finite_difference_probes`` -- the
  central-difference oracle used to audit every analytic gradient. These
  never touch autograd, so agreement between the two paths is meaningful.
* ``conv2d`` -- cross-correlation with explicit shape validation.

Precision: float32 for training and inference, float64 for verification
runs (the finite-difference oracle requires 64-bit inputs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Sequence, Tuple

import torch

from .errors import NonFiniteError, ShapeError, ValidationError

Tensor = torch.Tensor
ParamSet = Dict[str, Tensor]


def check_finite(t: Tensor, context: str) -> Tensor:
    """Raise NonFiniteError naming `context` if `t` has a NaN or Inf."""
    if not torch.isfinite(t).all():
        raise NonFiniteError(context)
    return t


@dataclass
class Graph:
    """A recorded computation: parameters in, scalar loss out.

    `fn` must be a pure function of the parameter set (plus whatever
    constants it closes over) so that replaying it reproduces the loss
    bit-identically in a given precision mode.
    """

    fn: Callable[[ParamSet], Tensor]
    params: ParamSet

    def loss(self, params: ParamSet | None = None) -> Tensor:
        out = self.fn(self.params if params is None else params)
        if out.dim() != 0:
            raise ShapeError(f"graph must terminate in a scalar, got shape {tuple(out.shape)}")
        return out


def evaluate_with_gradients(graph: Graph) -> Tuple[float, ParamSet]:
    """Evaluate the graph and return (loss, one gradient per parameter).

    Parameters that do not influence the loss receive zero gradients of
    the parameter's shape. Non-finite values abort with the producing
    context named.
    """
    leaves = {n: p.detach().clone().requires_grad_(True) for n, p in graph.params.items()}
    loss = graph.loss(leaves)
    check_finite(loss, "forward pass (loss)")
    grads = torch.autograd.grad(
        loss, list(leaves.values()), allow_unused=True, materialize_grads=False
    )
    out: ParamSet = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        if g is None:
            g = torch.zeros_like(leaf)
        check_finite(g, f"backward pass (gradient of {name})")
        out[name] = g.detach()
    return float(loss.detach()), out


def _require_fd_preconditions(graph: Graph, step: float) -> None:
    if step <= 0:
        raise ValidationError(f"finite-difference step must be > 0, got {step}")
    for name, p in graph.params.items():
        if p.dtype != torch.float64:
            raise ValidationError(
                f"finite differences require 64-bit parameters; {name} is {p.dtype}"
            )


def finite_difference_gradients(graph: Graph, step: float) -> ParamSet:
    """Central-difference gradient estimate, every element of every parameter.

    (f(theta+h) - f(theta-h)) / 2h per element. Deliberately independent of
    autograd: the only torch machinery used is tensor arithmetic under
    no_grad. Cost is two loss evaluations per element; keep graphs small.
    """
    _require_fd_preconditions(graph, step)
    out: ParamSet = {}
    with torch.no_grad():
        for name in graph.params:
            base = graph.params[name]
            est = torch.zeros_like(base)
            flat = est.view(-1)
            for idx in range(base.numel()):
                flat[idx] = _central_difference(graph, name, idx, step)
            out[name] = est
    return out


def finite_difference_probes(
    graph: Graph, step: float, probes: Iterable[Tuple[str, int]]
) -> Dict[Tuple[str, int], float]:
    """Central differences at selected (parameter name, flat index) sites.

    Used by the gradient audits, which sample ~100 sites per layer rather
    than differencing every element of a large network.
    """
    _require_fd_preconditions(graph, step)
    with torch.no_grad():
        return {(n, i): _central_difference(graph, n, i, step) for n, i in probes}


def _central_difference(graph: Graph, name: str, flat_index: int, step: float) -> float:
    work = {n: (p.detach().clone() if n == name else p.detach()) for n, p in graph.params.items()}
    flat = work[name].view(-1)
    orig = flat[flat_index].item()
    flat[flat_index] = orig + step
    f_plus = float(graph.loss(work))
    flat[flat_index] = orig - step
    f_minus = float(graph.loss(work))
    flat[flat_index] = orig
    return (f_plus - f_minus) / (2.0 * step)


def conv2d(
    input: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of `input` (N,Cin,H,W or Cin,H,W) with `kernel`
    (Cout,Cin,kh,kw). Output spatial size is (in + 2*pad - k)//stride + 1.
    """
    squeeze = input.dim() == 3
    if squeeze:
        input = input.unsqueeze(0)
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {tuple(input.shape)} and {tuple(kernel.shape)}"
        )
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {input.shape[1]} channels, "
            f"kernel expects {kernel.shape[1]}"
        )
    out = torch.nn.functional.conv2d(input, kernel, stride=stride, padding=padding)
    check_finite(out, "conv2d")
    return out.squeeze(0) if squeeze else out


def to_param_set(module: torch.nn.Module, prefix: str = "") -> ParamSet:
    """Named parameters of a module as a ParamSet (stable insertion order)."""
    return {prefix + n: p for n, p in module.named_parameters()}


def random_probe_sites(
    params: ParamSet, n: int, rng: torch.Generator
) -> Sequence[Tuple[str, int]]:
    """Sample n (name, flat index) probe sites uniformly over all elements."""
    names = list(params)
    sizes = torch.tensor([params[k].numel() for k in names], dtype=torch.float64)
    total = int(sizes.sum())
    picks = torch.randint(0, total, (n,), generator=rng)
    bounds = torch.cumsum(sizes, 0)
    sites = []
    for p in picks.tolist():
        which = int(torch.searchsorted(bounds, torch.tensor(p, dtype=torch.float64), right=True))
        offset = p - int(bounds[which - 1]) if which > 0 else p
        sites.append((names[which], int(offset)))
    return sites
