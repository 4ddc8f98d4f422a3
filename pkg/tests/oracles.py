"""Independent reference computations used by several test modules."""

import numpy as np

from diffpf.network import admittance_matrix
from diffpf.powerflow import StateBatch, compute_injections


def dense_injections(topo, params, state):
    """P + iQ = V * conj(Y V) with the full complex admittance matrix."""
    y = admittance_matrix(params, topo.incidence)
    volt = state.v * np.exp(1j * state.theta)
    s = volt * np.conj(y @ volt)
    return s.real, s.imag


def fd_jacobian(topo, params, state, h=1e-7):
    """Central differences of the mismatch rows w.r.t. [theta over buses 1.., v over loads]."""
    load = topo.load_idx
    n_p = topo.n_bus - 1
    cols = [("theta", i) for i in range(1, topo.n_bus)] + [("v", i) for i in load]
    n_s = state.v.shape[1]
    jac = np.empty((n_s, n_p + len(load), len(cols)))

    def rows(st):
        p, q = compute_injections(st, params, topo)
        return np.concatenate([p[1:], q[load]])

    for c, (field, i) in enumerate(cols):
        up, dn = state.copy(), state.copy()
        getattr(up, field)[i] += h
        getattr(dn, field)[i] -= h
        jac[:, :, c] = ((rows(up) - rows(dn)) / (2 * h)).T
    return jac


def rel_err(a, b, floor):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def two_bus_solution(y, s):
    """Closed-form load-bus voltage for slack (1, 0) feeding injection ``s`` over line ``y``."""
    z = s / np.conj(y)
    a = 2 * z.real + 1
    v2 = (a + np.sqrt(a * a - 4 * abs(z) ** 2)) / 2
    return np.sqrt(v2), np.angle(v2 - z)


def random_state_near(topo, n, seed):
    rng = np.random.default_rng(seed)
    return StateBatch(rng.uniform(0.9, 1.1, (topo.n_bus, n)), rng.uniform(-0.4, 0.4, (topo.n_bus, n)))
