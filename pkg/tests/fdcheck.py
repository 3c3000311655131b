"""Central finite-difference gradient oracle shared by gradient tests.

Kept deliberately independent of autograd: it only re-evaluates the forward
function under elementwise perturbations.
"""

import torch


def fd_gradient(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar f() w.r.t. tensor x, perturbed in place."""
    grad = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom
