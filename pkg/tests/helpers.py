"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np

from dualffn.tensor import Tape, Tensor, backward


def numeric_grad(f, t: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every entry of t.data."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grads(f, tensors):
    """Gradient of scalar-valued graph builder f w.r.t. each tensor in tensors."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = f()
        gmap = backward(loss)
    return [gmap.get(t, np.zeros_like(t.data)) for t in tensors]


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # Entries far below the tensor's gradient scale are dominated by
    # finite-difference roundoff; normalize those by a fraction of the scale.
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(0.01 * scale, 1e-8))
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build, tensors, tol: float = 1e-5, h: float = 1e-6) -> float:
    """Assert analytic gradients match central differences for every input.

    `build` constructs the graph and returns a scalar Tensor; it is re-run
    for every perturbed evaluation, so it must be deterministic.
    """
    analytic = analytic_grads(build, tensors)

    def scalar():
        return float(build().data)

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        gn = numeric_grad(scalar, t, h=h)
        worst = max(worst, rel_err(ga, gn))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst
