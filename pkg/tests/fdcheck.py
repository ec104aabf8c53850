"""Central-finite-difference gradient checking used across the test suite.

Comparisons use a unit-floored relative error |a - f| / max(1, |a|, |f|):
FD noise on O(1) losses sits around 1e-10 at fp64 with step 1e-5, so a 1e-4
bound separates real gradient bugs from roundoff even when a true gradient
is exactly zero (hinge dead zones, clamped variance floors).
"""

import torch

FD_STEP = 1e-5
REL_TOL = 1e-4


def fd_grad_inputs(fn, inputs, step=FD_STEP):
    """Finite-difference gradients of scalar fn(*inputs) w.r.t. each tensor."""
    grads = []
    for k, x in enumerate(inputs):
        g = torch.zeros_like(x)
        flat_x = x.view(-1)
        flat_g = g.view(-1)
        for i in range(flat_x.numel()):
            orig = flat_x[i].item()
            flat_x[i] = orig + step
            f_plus = float(fn(*inputs))
            flat_x[i] = orig - step
            f_minus = float(fn(*inputs))
            flat_x[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def fd_grad_params(module, loss_fn, step=FD_STEP):
    """Finite-difference gradients of loss_fn() w.r.t. every module parameter."""
    grads = []
    with torch.no_grad():
        for p in module.parameters():
            flat = p.view(-1)
            g = torch.zeros(flat.numel(), dtype=p.dtype)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g.view(p.shape))
    return grads


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=1.0)
    return float(((a - b).abs() / denom).max())


def assert_close(analytic, fd, rel_tol=REL_TOL, context=""):
    worst = 0.0
    for a, f in zip(analytic, fd):
        if a is None:
            a = torch.zeros_like(f)
        worst = max(worst, rel_error(a, f))
    assert worst < rel_tol, f"gradient mismatch {context}: rel error {worst:.3e}"
    return worst


def check_input_grads(fn, inputs, rel_tol=REL_TOL, context=""):
    """Compare autograd against FD for scalar fn over float64 leaf inputs."""
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    loss = fn(*leaves)
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    with torch.no_grad():
        fixed = [x.detach().clone() for x in inputs]
    fd = fd_grad_inputs(fn, fixed)
    return assert_close(analytic, fd, rel_tol, context)


def check_param_grads(module, loss_fn, rel_tol=REL_TOL, context=""):
    """Compare autograd against FD for every parameter of a float64 module."""
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    analytic = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in module.parameters()
    ]
    module.zero_grad(set_to_none=True)
    fd = fd_grad_params(module, loss_fn)
    return assert_close(analytic, fd, rel_tol, context)
