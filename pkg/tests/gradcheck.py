"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from dsinfer.models import ArchSpec, init_model, input_gradient, loss_and_grad

ARCHS = {
    "linear": ArchSpec("linear", 6, 4),
    "mlp_relu": ArchSpec("mlp", 6, 4, (8, 5), "relu"),
    "mlp_tanh": ArchSpec("mlp", 6, 4, (7,), "tanh"),
}


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def fd_param_grad(model, x, labels=None, teacher=None, h=1e-6):
    g = np.empty_like(model.params)
    for i in range(model.params.size):
        p = model.params.copy()
        p[i] += h
        up, _ = loss_and_grad(model, x, labels, teacher, flat=p)
        p[i] -= 2 * h
        down, _ = loss_and_grad(model, x, labels, teacher, flat=p)
        g[i] = (up - down) / (2 * h)
    return g


def fd_input_grad(model, x, objective, k, h=1e-6):
    def f(v):
        z = model.forward(v[None, :])[0]
        if objective == "logit":
            return z[k]
        other = np.delete(z, k)
        return other.max() - z[k]
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gradient_case(arch_name: str, case: int):
    """Return ``(param_rel_err, input_rel_err)`` for one random case."""
    arch = ARCHS[arch_name]
    rng = np.random.default_rng([17, case])
    model = init_model(arch, [case, 3])
    x = rng.uniform(0, 1, size=(5, arch.input_dim))
    if case % 2:
        labels, teacher = None, rng.normal(size=(5, arch.num_classes))
    else:
        labels, teacher = rng.integers(0, arch.num_classes, 5), None
    _, g = loss_and_grad(model, x, labels, teacher)
    p_err = rel_err(g, fd_param_grad(model, x, labels, teacher))
    k = int(rng.integers(arch.num_classes))
    objective = ("logit", "margin")[case % 2]
    gi = input_gradient(model, x[0], objective, k)
    i_err = rel_err(gi, fd_input_grad(model, x[0], objective, k))
    return p_err, i_err
