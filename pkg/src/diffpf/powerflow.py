"""Batched power-flow injections, Jacobian and the n-step mixed PV-PQ Newton-Raphson solver.

Array layout follows the bus-by-sample convention: every state or injection
array has shape ``(n_bus, n_samples)`` (or the size of the relevant bus subset
on the first axis).

The reduced Newton system uses the unknowns ``[theta over non-slack buses;
v over load buses]`` in bus-index order, with mismatch rows ``[P - p over
non-slack buses; Q - q over load buses]`` in the same order. With the
mismatch defined as computed minus specified, each step subtracts
``J^{-1} @ mismatch`` so that an exact solution is a fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .errors import NoConvergence, SingularJacobian
from .network import AdmittanceParams, GridTopology, line_admittances

# reciprocal condition number below which a Jacobian is treated as singular
RCOND_MIN = np.finfo(float).eps


@dataclass
class StateBatch:
    v: np.ndarray
    theta: np.ndarray

    @property
    def n_samples(self):
        return self.v.shape[1]

    def copy(self):
        return StateBatch(self.v.copy(), self.theta.copy())


@dataclass
class PfInputBatch:
    """Specified quantities: generator set-points, non-slack active and load reactive injections."""

    v_g: np.ndarray
    p: np.ndarray
    q_l: np.ndarray

    def __post_init__(self):
        self.v_g = np.atleast_2d(np.asarray(self.v_g, dtype=float))
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        self.q_l = np.atleast_2d(np.asarray(self.q_l, dtype=float))
        n = {a.shape[1] for a in (self.v_g, self.p, self.q_l)}
        if len(n) != 1 or n.pop() < 1:
            raise ValueError("input blocks must share a sample count >= 1")
        for a in (self.v_g, self.p, self.q_l):
            if not np.all(np.isfinite(a)):
                raise ValueError("inputs must be finite")

    @property
    def n_samples(self):
        return self.p.shape[1]

    def take(self, cols) -> "PfInputBatch":
        return PfInputBatch(self.v_g[:, cols], self.p[:, cols], self.q_l[:, cols])


@dataclass
class PfOutputBatch:
    theta: np.ndarray
    v: np.ndarray
    q_g: np.ndarray

    def state(self):
        return StateBatch(self.v, self.theta)


class _Layout:
    """Index bookkeeping for the reduced Newton system of one topology."""

    def __init__(self, topology: GridTopology):
        n = topology.n_bus
        self.gen = topology.gen_idx
        self.load = topology.load_idx
        self.n_p = n - 1
        self.m = self.n_p + len(self.load)
        # position of each bus in the theta/P block and the v/Q block (-1: absent)
        pos_p = np.arange(-1, n - 1)
        pos_q = np.full(n, -1)
        pos_q[self.load] = self.n_p + np.arange(len(self.load))
        self.pos_p = pos_p
        self.pos_q = pos_q

        src, tgt = topology.src, topology.tgt
        ends = {"s": src, "t": tgt}
        rows, cols, keys = [], [], []
        # per-line partials: (row block, row end, column block, column end)
        for rblock, rpos in (("P", pos_p), ("Q", pos_q)):
            for rend in ("s", "t"):
                for cblock, cpos in (("theta", pos_p), ("v", pos_q)):
                    for cend in ("s", "t"):
                        r = rpos[ends[rend]]
                        c = cpos[ends[cend]]
                        rows.append(r)
                        cols.append(c)
                        keys.append((rblock, rend, cblock, cend))
        self.line_keys = keys
        r = np.stack(rows)
        c = np.stack(cols)
        self.line_valid = (r >= 0) & (c >= 0)
        self.line_flat = (r * self.m + c)[self.line_valid]
        # diagonal v-partials from the v_i^2 terms, load buses only
        qd = pos_q[self.load]
        self.diag_p_rows = pos_p[self.load]
        self.diag_flat_p = pos_p[self.load] * self.m + qd
        self.diag_flat_q = qd * self.m + qd


def layout(topology: GridTopology) -> _Layout:
    cached = topology.__dict__.get("_pf_layout")
    if cached is None:
        cached = _Layout(topology)
        topology.__dict__["_pf_layout"] = cached
    return cached


def _scatter(n_bus, idx, vals):
    out = np.zeros((n_bus,) + vals.shape[1:])
    np.add.at(out, idx, vals)
    return out


def bus_totals(topology, g, b, shunt_g, shunt_b):
    """Diagonal conductance/susceptance sums ``sum_k g_k + g_sh`` per bus."""
    src, tgt = topology.incidence.src, topology.incidence.tgt
    gd = np.array(shunt_g, dtype=float)
    bd = np.array(shunt_b, dtype=float)
    np.add.at(gd, src, g)
    np.add.at(gd, tgt, g)
    np.add.at(bd, src, b)
    np.add.at(bd, tgt, b)
    return gd, bd


def line_terms(topology, v, theta):
    """Per-line products ``v_s v_t`` and ``cos``/``sin`` of ``theta_t - theta_s``."""
    src, tgt = topology.incidence.src, topology.incidence.tgt
    w = v[src] * v[tgt]
    delta = theta[tgt] - theta[src]
    return w, np.cos(delta), np.sin(delta)


def injections(topology, v, theta, g, b, shunt_g, shunt_b):
    """Active and reactive injections for raw arrays; ``g``/``b`` are line values."""
    src, tgt = topology.incidence.src, topology.incidence.tgt
    n = topology.n_bus
    w, c, s = line_terms(topology, v, theta)
    g = g[:, None]
    b = b[:, None]
    gc, gs, bc, bs = g * c, g * s, b * c, b * s
    gd, bd = bus_totals(topology, g[:, 0], b[:, 0], shunt_g, shunt_b)
    v2 = v * v
    idx = np.concatenate([src, tgt])
    p = _scatter(n, idx, np.concatenate([w * (bs - gc), w * (-gc - bs)]))
    q = _scatter(n, idx, np.concatenate([w * (gs + bc), w * (bc - gs)]))
    p += v2 * gd[:, None]
    q -= v2 * bd[:, None]
    return p, q


def compute_injections(state: StateBatch, params: AdmittanceParams, topology: GridTopology):
    """Return ``(P, Q)`` of shape ``(n_bus, n_samples)`` for every bus."""
    g, b = line_admittances(params)
    return injections(topology, state.v, state.theta, g, b, params.shunt_g, params.shunt_b)


def jacobian(topology, v, theta, g, b, shunt_g, shunt_b):
    """Reduced Jacobians as an array of shape ``(n_samples, m, m)``."""
    lay = layout(topology)
    src, tgt = topology.incidence.src, topology.incidence.tgt
    w, c, s = line_terms(topology, v, theta)
    g = g[:, None]
    b = b[:, None]
    gc, gs, bc, bs = g * c, g * s, b * c, b * s
    # h: per-line injection shape factor, dh: its derivative in delta
    h = {
        ("P", "s"): bs - gc,
        ("P", "t"): -gc - bs,
        ("Q", "s"): gs + bc,
        ("Q", "t"): bc - gs,
    }
    dh = {
        ("P", "s"): gs + bc,
        ("P", "t"): gs - bc,
        ("Q", "s"): gc - bs,
        ("Q", "t"): -gc - bs,
    }
    vs, vt = v[src], v[tgt]
    vals = []
    for rblock, rend, cblock, cend in lay.line_keys:
        key = (rblock, rend)
        if cblock == "theta":
            val = w * dh[key] if cend == "t" else -(w * dh[key])
        else:
            val = vt * h[key] if cend == "s" else vs * h[key]
        vals.append(val)
    vals = np.stack(vals)[lay.line_valid]
    n_samples = v.shape[1]
    m = lay.m
    jt = np.zeros((m * m, n_samples))
    np.add.at(jt, lay.line_flat, vals)
    gd, bd = bus_totals(topology, g[:, 0], b[:, 0], shunt_g, shunt_b)
    vl = v[lay.load]
    np.add.at(jt, lay.diag_flat_p, 2.0 * vl * gd[lay.load, None])
    np.add.at(jt, lay.diag_flat_q, -2.0 * vl * bd[lay.load, None])
    return np.ascontiguousarray(jt.T).reshape(n_samples, m, m)


def assemble_jacobian(state: StateBatch, params: AdmittanceParams, topology: GridTopology):
    g, b = line_admittances(params)
    return jacobian(topology, state.v, state.theta, g, b, params.shunt_g, params.shunt_b)


def flat_start(inputs: PfInputBatch, topology: GridTopology) -> StateBatch:
    n = inputs.n_samples
    v = np.ones((topology.n_bus, n))
    v[topology.gen_idx] = inputs.v_g
    return StateBatch(v=v, theta=np.zeros((topology.n_bus, n)))


def mismatch(topology, p_calc, q_calc, inputs: PfInputBatch):
    lay = layout(topology)
    return np.concatenate([p_calc[1:] - inputs.p, q_calc[lay.load] - inputs.q_l])


class LUSolver:
    """Dense LU with partial pivoting for one square system.

    Keeps the factorization so the transposed system can be solved without
    refactoring, which the reverse sweep relies on.
    """

    __slots__ = ("lu", "piv")

    def __init__(self, lu, piv):
        self.lu = lu
        self.piv = piv

    def solve(self, rhs, trans=False):
        x, _ = lapack.dgetrs(self.lu, self.piv, rhs, trans=1 if trans else 0)
        return x


def factor_batch(jac, step=0):
    """LU-factor every sample's Jacobian; raise :class:`SingularJacobian` on the first bad one.

    Singularity is judged by the pivot growth ``min|u_ii| / max|u_ii|``, a cheap
    lower bound on the reciprocal condition number.
    """
    if not np.isfinite(jac).all():
        bad = int(np.flatnonzero(~np.isfinite(jac).reshape(len(jac), -1).all(axis=1))[0])
        raise SingularJacobian(bad, step, np.inf)
    solvers = []
    diag = np.empty((len(jac), jac.shape[1]))
    for a in range(len(jac)):
        lu, piv, info = lapack.dgetrf(jac[a])
        if info > 0:
            raise SingularJacobian(a, step, np.inf)
        diag[a] = np.diagonal(lu)
        solvers.append(LUSolver(lu, piv))
    if diag.shape[1]:
        mag = np.abs(diag)
        ratio = mag.min(axis=1) / mag.max(axis=1)
        bad = np.flatnonzero(~(ratio >= RCOND_MIN))
        if bad.size:
            a = int(bad[0])
            raise SingularJacobian(a, step, np.inf if ratio[a] == 0 else 1.0 / ratio[a])
    return solvers


@dataclass
class _Step:
    v: np.ndarray
    theta: np.ndarray
    solvers: list
    delta: np.ndarray


def _newton_step(topology, v, theta, g, b, sg, sb, inputs, step):
    lay = layout(topology)
    p_calc, q_calc = injections(topology, v, theta, g, b, sg, sb)
    r = mismatch(topology, p_calc, q_calc, inputs)
    jac = jacobian(topology, v, theta, g, b, sg, sb)
    solvers = factor_batch(jac, step)
    delta = np.empty_like(r)
    for a, lu in enumerate(solvers):
        delta[:, a] = lu.solve(r[:, a])
    v_new = v.copy()
    theta_new = theta.copy()
    theta_new[1:] -= delta[: lay.n_p]
    v_new[lay.load] -= delta[lay.n_p :]
    return v_new, theta_new, solvers, delta


def unroll(inputs, params, topology, n, record=False):
    """Run ``n`` Newton steps from flat start.

    Returns the final ``(v, theta)`` and, when ``record`` is set, the list of
    per-step iterates, LU factors and increments needed for the reverse sweep.
    """
    g, b = line_admittances(params)
    sg, sb = params.shunt_g, params.shunt_b
    start = flat_start(inputs, topology)
    v, theta = start.v, start.theta
    tape = []
    for k in range(1, n + 1):
        v_new, theta_new, solvers, delta = _newton_step(
            topology, v, theta, g, b, sg, sb, inputs, k
        )
        if record:
            tape.append(_Step(v, theta, solvers, delta))
        v, theta = v_new, theta_new
    return v, theta, tape


def nr_solve(inputs: PfInputBatch, params: AdmittanceParams, topology: GridTopology, n: int):
    """Exactly ``n`` Newton-Raphson iterations from flat start, then generator reactive power."""
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    v, theta, _ = unroll(inputs, params, topology, int(n))
    _, q_calc = compute_injections(StateBatch(v, theta), params, topology)
    return PfOutputBatch(theta=theta, v=v, q_g=q_calc[topology.gen_idx])


def max_mismatch(inputs, params, topology, state: StateBatch):
    """Per-sample infinity norm of the ``(dp, dq)`` mismatch."""
    p_calc, q_calc = compute_injections(state, params, topology)
    r = mismatch(topology, p_calc, q_calc, inputs)
    if r.shape[0] == 0:
        return np.zeros(r.shape[1])
    return np.abs(r).max(axis=0)


def nr_converge(inputs, params, topology, tol=1e-10, max_iter=50):
    """Iterate until every sample's mismatch is below ``tol``.

    Converged samples are frozen while the others continue, so each column's
    result does not depend on which other samples share the batch.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    g, b = line_admittances(params)
    sg, sb = params.shunt_g, params.shunt_b
    state = flat_start(inputs, topology)
    v, theta = state.v, state.theta
    n_samples = inputs.n_samples
    failed = []
    active = np.arange(n_samples)
    iterations = 0
    while True:
        res = max_mismatch(
            inputs.take(active), params, topology, StateBatch(v[:, active], theta[:, active])
        )
        bad = ~np.isfinite(res)
        failed.extend(active[bad].tolist())
        keep = ~bad & ~(res < tol)
        active = active[keep]
        if active.size == 0:
            break
        if iterations >= max_iter:
            failed.extend(active.tolist())
            break
        iterations += 1
        try:
            v_a, th_a, _, _ = _newton_step(
                topology, v[:, active], theta[:, active], g, b, sg, sb,
                inputs.take(active), iterations,
            )
        except SingularJacobian as exc:
            raise SingularJacobian(int(active[exc.sample]), exc.step, exc.condition) from None
        v[:, active] = v_a
        theta[:, active] = th_a
    if failed:
        raise NoConvergence(sorted(failed), iterations)
    _, q_calc = compute_injections(StateBatch(v, theta), params, topology)
    out = PfOutputBatch(theta=theta, v=v, q_g=q_calc[topology.gen_idx])
    return out, iterations
