"""Reverse-mode gradients of generator-side losses through the unrolled Newton solver.

The forward pass keeps every iterate and LU factorization. The reverse sweep
walks the steps backwards; for a step ``x' = x - J^{-1} r`` with cotangent
``xbar'`` it solves ``J^T lam = -xbar'`` with the stored factors and then
needs two vector-Jacobian products:

* ``lam^T dF``          -- the mismatch ``r`` depends on the state and params,
* ``-lam^T (dJ) d``     -- the Jacobian itself does too.

Both are gradients of weighted injection sums
``phi = sum_i mu_i P_i + nu_i Q_i``: the first of ``phi`` itself, the second
of its directional derivative along the step ``d``. Per line ``phi`` reduces to
``v_s v_t (A cos(delta) + B sin(delta))`` with ``A``, ``B`` linear in ``(g, b)``,
which makes both gradients short closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .network import PARAM_GROUPS, AdmittanceParams, GridTopology, line_admittances
from .powerflow import PfInputBatch, bus_totals, injections, layout, line_terms, unroll

LOSS_TERMS = ("theta_g", "q_g", "p_g", "v_g")


@dataclass
class GenTargets:
    """Measured generator quantities, each of shape ``(n_gen, n_samples)``."""

    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def take(self, cols) -> "GenTargets":
        return GenTargets(self.v[:, cols], self.theta[:, cols], self.p[:, cols], self.q[:, cols])


@dataclass
class ParamGradient:
    """Gradient per trainable group; frozen groups are ``None``, never zero-filled."""

    d_gamma: np.ndarray = None
    d_beta: np.ndarray = None
    d_shunt_g: np.ndarray = None
    d_shunt_b: np.ndarray = None

    def groups(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if val is not None:
                out[f.name[2:]] = val
        return out

    def flat(self):
        return np.concatenate([self.groups()[k] for k in PARAM_GROUPS if k in self.groups()])

    def norm(self):
        return float(np.linalg.norm(self.flat()))


def _terms(loss_spec):
    terms = getattr(loss_spec, "terms", loss_spec)
    terms = frozenset(terms)
    unknown = terms - set(LOSS_TERMS)
    if not terms or unknown:
        raise ValueError(f"invalid loss terms {sorted(terms)}")
    return terms


def _residuals(topology, v, theta, p_calc, q_calc, targets, terms):
    gen = topology.gen_idx
    res = {}
    if "theta_g" in terms:
        res["theta_g"] = theta[gen] - targets.theta
    if "q_g" in terms:
        res["q_g"] = q_calc[gen] - targets.q
    if "p_g" in terms:
        res["p_g"] = p_calc[gen] - targets.p
    if "v_g" in terms:
        res["v_g"] = v[gen] - targets.v
    return res


def _normalizer(topology, n_samples):
    n_gen = len(topology.gen_idx)
    if n_gen == 0:
        raise ValueError("loss needs at least one generator bus")
    return 1.0 / (n_samples * n_gen)


def forward_loss(params, inputs: PfInputBatch, targets: GenTargets, n, loss_spec, topology,
                 record=False):
    """Loss after ``n`` Newton steps. Returns ``(loss, tape, v, theta, residuals)``."""
    terms = _terms(loss_spec)
    v, theta, tape = unroll(inputs, params, topology, n, record=record)
    g, b = line_admittances(params)
    p_calc, q_calc = injections(topology, v, theta, g, b, params.shunt_g, params.shunt_b)
    res = _residuals(topology, v, theta, p_calc, q_calc, targets, terms)
    scale = _normalizer(topology, inputs.n_samples)
    total = 0.0
    for name in LOSS_TERMS:
        if name in res:
            total += float(np.sum(res[name] * res[name]))
    return scale * total, tape, v, theta, res


def _line_coeffs(topology, mu, nu):
    src, tgt = topology.incidence.src, topology.incidence.tgt
    mu_sum = mu[src] + mu[tgt]
    mu_dif = mu[src] - mu[tgt]
    nu_sum = nu[src] + nu[tgt]
    nu_dif = nu[src] - nu[tgt]
    return mu_sum, mu_dif, nu_sum, nu_dif


def _accumulate(topology, vbar_line_s, vbar_line_t, thbar_line):
    """Scatter per-line partials onto buses; ``thbar_line`` is d/d(theta_t - theta_s)."""
    src, tgt = topology.incidence.src, topology.incidence.tgt
    n = topology.n_bus
    shape = (n,) + thbar_line.shape[1:]
    vbar = np.zeros(shape)
    thbar = np.zeros(shape)
    np.add.at(vbar, src, vbar_line_s)
    np.add.at(vbar, tgt, vbar_line_t)
    np.add.at(thbar, tgt, thbar_line)
    np.add.at(thbar, src, -thbar_line)
    return vbar, thbar


def phi_grad(topology, v, theta, g, b, gd, bd, mu, nu):
    """Gradient of ``sum mu*P + nu*Q`` in state ``(v, theta)`` and in ``(g, b, g_sh, b_sh)``."""
    src, tgt = topology.incidence.src, topology.incidence.tgt
    w, c, s = line_terms(topology, v, theta)
    mu_sum, mu_dif, nu_sum, nu_dif = _line_coeffs(topology, mu, nu)
    gcol, bcol = g[:, None], b[:, None]
    a = bcol * nu_sum - gcol * mu_sum
    bb = bcol * mu_dif + gcol * nu_dif
    h = a * c + bb * s
    dh = bb * c - a * s
    vbar, thbar = _accumulate(topology, v[tgt] * h, v[src] * h, w * dh)
    v2 = v * v
    vbar += 2.0 * v * (mu * gd[:, None] - nu * bd[:, None])
    mv2 = mu * v2
    nv2 = nu * v2
    gbar = np.sum(w * (s * nu_dif - c * mu_sum) + mv2[src] + mv2[tgt], axis=1)
    bbar = np.sum(w * (c * nu_sum + s * mu_dif) - nv2[src] - nv2[tgt], axis=1)
    gshbar = np.sum(mv2, axis=1)
    bshbar = -np.sum(nv2, axis=1)
    return vbar, thbar, gbar, bbar, gshbar, bshbar


def psi_grad(topology, v, theta, g, b, gd, bd, mu, nu, dv, dtheta):
    """Gradient of the directional derivative of ``sum mu*P + nu*Q`` along ``(dv, dtheta)``."""
    src, tgt = topology.incidence.src, topology.incidence.tgt
    w, c, s = line_terms(topology, v, theta)
    mu_sum, mu_dif, nu_sum, nu_dif = _line_coeffs(topology, mu, nu)
    gcol, bcol = g[:, None], b[:, None]
    a = bcol * nu_sum - gcol * mu_sum
    bb = bcol * mu_dif + gcol * nu_dif
    h = a * c + bb * s
    dh = bb * c - a * s
    vs, vt = v[src], v[tgt]
    dvs, dvt = dv[src], dv[tgt]
    u = dvs * vt + vs * dvt
    ddelta = dtheta[tgt] - dtheta[src]
    vbar, thbar = _accumulate(
        topology,
        dvt * h + vt * dh * ddelta,
        dvs * h + vs * dh * ddelta,
        u * dh - w * h * ddelta,
    )
    weight = mu * gd[:, None] - nu * bd[:, None]
    vbar += 2.0 * dv * weight
    dpsi_da = u * c - w * s * ddelta
    dpsi_db = u * s + w * c * ddelta
    vdv = v * dv
    mvd = 2.0 * mu * vdv
    nvd = 2.0 * nu * vdv
    gbar = np.sum(nu_dif * dpsi_db - mu_sum * dpsi_da + mvd[src] + mvd[tgt], axis=1)
    bbar = np.sum(nu_sum * dpsi_da + mu_dif * dpsi_db - nvd[src] - nvd[tgt], axis=1)
    gshbar = np.sum(mvd, axis=1)
    bshbar = -np.sum(nvd, axis=1)
    return vbar, thbar, gbar, bbar, gshbar, bshbar


def _to_param_gradient(params, g, b, gbar, bbar, gshbar, bshbar):
    grads = {
        "gamma": gbar * g,  # dg/dgamma = g
        "beta": bbar * b,  # db/dbeta = -exp(beta) = b
        "shunt_g": gshbar,
        "shunt_b": bshbar,
    }
    return ParamGradient(**{f"d_{k}": grads[k] for k in PARAM_GROUPS if k in params.trainable})


def loss_and_gradient(params: AdmittanceParams, batch, n, loss_spec, topology: GridTopology):
    """Loss after ``n`` Newton steps and its exact gradient in the trainable groups.

    ``batch`` is an ``(inputs, targets)`` pair of :class:`PfInputBatch` and
    :class:`GenTargets`.
    """
    inputs, targets = batch
    loss, tape, v, theta, res = forward_loss(
        params, inputs, targets, n, loss_spec, topology, record=True
    )
    lay = layout(topology)
    gen = topology.gen_idx
    g, b = line_admittances(params)
    gd, bd = bus_totals(topology, g, b, params.shunt_g, params.shunt_b)
    scale = 2.0 * _normalizer(topology, inputs.n_samples)

    shape = v.shape
    mu = np.zeros(shape)
    nu = np.zeros(shape)
    if "p_g" in res:
        mu[gen] = scale * res["p_g"]
    if "q_g" in res:
        nu[gen] = scale * res["q_g"]
    vbar, thbar, gbar, bbar, gshbar, bshbar = phi_grad(
        topology, v, theta, g, b, gd, bd, mu, nu
    )
    if "theta_g" in res:
        thbar[gen] += scale * res["theta_g"]
    # the v_g residual only involves pinned set-points: no parameter dependence

    n_p = lay.n_p
    for step in reversed(tape):
        xbar = np.concatenate([thbar[1:], vbar[lay.load]])
        lam = np.empty_like(xbar)
        for a, lu in enumerate(step.solvers):
            lam[:, a] = lu.solve(-xbar[:, a], trans=True)
        mu = np.zeros(shape)
        nu = np.zeros(shape)
        mu[1:] = lam[:n_p]
        nu[lay.load] = lam[n_p:]
        dtheta = np.zeros(shape)
        dv = np.zeros(shape)
        dtheta[1:] = step.delta[:n_p]
        dv[lay.load] = step.delta[n_p:]

        f = phi_grad(topology, step.v, step.theta, g, b, gd, bd, mu, nu)
        j = psi_grad(topology, step.v, step.theta, g, b, gd, bd, mu, nu, dv, dtheta)
        vbar = vbar + f[0] - j[0]
        thbar = thbar + f[1] - j[1]
        gbar = gbar + f[2] - j[2]
        bbar = bbar + f[3] - j[3]
        gshbar = gshbar + f[4] - j[4]
        bshbar = bshbar + f[5] - j[5]

    return loss, _to_param_gradient(params, g, b, gbar, bbar, gshbar, bshbar)


def finite_diff_gradient(params: AdmittanceParams, batch, n, loss_spec, topology, h=1e-6,
                         loss_fn=None):
    """Central-difference gradient over every trainable coordinate.

    ``loss_fn(params) -> float`` overrides the Newton-based forward loss, which
    is otherwise the exact path used by :func:`loss_and_gradient`.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    if loss_fn is None:
        inputs, targets = batch

        def loss_fn(p):
            return forward_loss(p, inputs, targets, n, loss_spec, topology)[0]

    out = {}
    for name in PARAM_GROUPS:
        if name not in params.trainable:
            continue
        base = getattr(params, name)
        grad = np.empty_like(base)
        for j in range(base.size):
            up = base.copy()
            dn = base.copy()
            up[j] += h
            dn[j] -= h
            lp = loss_fn(params.with_groups(**{name: up}))
            lm = loss_fn(params.with_groups(**{name: dn}))
            grad[j] = (lp - lm) / (2.0 * h)
        out[f"d_{name}"] = grad
    return ParamGradient(**out)
