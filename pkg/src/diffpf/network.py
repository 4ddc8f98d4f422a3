"""Grid topology, incidence matrices and line-admittance parameterizations.

Buses are indexed densely ``0..n_bus-1`` with the slack bus always at index 0.
Lines are directed (source -> target) only to fix sign conventions; the
electrical model is direction-independent.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateImpedance,
    NonNegativeSusceptance,
    NonPositiveConductance,
    TopologyError,
)

PARAM_GROUPS = ("gamma", "beta", "shunt_g", "shunt_b")
LINE_GROUPS = frozenset({"gamma", "beta"})


class BusKind(enum.Enum):
    SLACK = "slack"
    GENERATOR = "generator"
    LOAD = "load"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridTopology:
    kinds: tuple
    lines: tuple
    base_mva: float = 100.0
    labels: tuple = None
    name: str = ""

    def __post_init__(self):
        kinds = tuple(BusKind(k) for k in self.kinds)
        lines = tuple((int(s), int(t)) for s, t in self.lines)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "lines", lines)
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(range(len(kinds))))
        else:
            object.__setattr__(self, "labels", tuple(self.labels))
        self._validate()

    def _validate(self):
        n = len(self.kinds)
        if n == 0:
            raise TopologyError("topology has no buses")
        n_slack = sum(k is BusKind.SLACK for k in self.kinds)
        if n_slack != 1:
            raise TopologyError(f"expected exactly one slack bus, found {n_slack}")
        if self.kinds[0] is not BusKind.SLACK:
            raise TopologyError("the slack bus must have index 0")
        if len(self.labels) != n:
            raise TopologyError("labels must have one entry per bus")
        for k, (s, t) in enumerate(self.lines):
            if not (0 <= s < n and 0 <= t < n):
                raise TopologyError(f"line {k} references a missing bus ({s}, {t})")
            if s == t:
                raise TopologyError(f"line {k} is a self-loop at bus {s}")
        if n > 1:
            src, tgt = self.src, self.tgt
            adj = coo_matrix((np.ones(len(src)), (src, tgt)), shape=(n, n))
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise TopologyError(f"grid graph is disconnected ({n_comp} components)")

    @property
    def n_bus(self):
        return len(self.kinds)

    @property
    def n_line(self):
        return len(self.lines)

    @property
    def src(self):
        return np.array([s for s, _ in self.lines], dtype=np.intp)

    @property
    def tgt(self):
        return np.array([t for _, t in self.lines], dtype=np.intp)

    @property
    def gen_idx(self):
        return np.array(
            [i for i, k in enumerate(self.kinds) if k is BusKind.GENERATOR], dtype=np.intp
        )

    @property
    def load_idx(self):
        return np.array(
            [i for i, k in enumerate(self.kinds) if k is BusKind.LOAD], dtype=np.intp
        )

    @property
    def nonslack_idx(self):
        return np.arange(1, self.n_bus, dtype=np.intp)

    @functools.cached_property
    def incidence(self) -> "IncidenceSet":
        return build_incidence(self)


@dataclass(frozen=True)
class IncidenceSet:
    """Source/target incidence matrices and their sum/difference.

    ``src``/``tgt`` carry the same information as index arrays; the hot paths
    scatter through them instead of multiplying dense matrices.
    """

    b_out: np.ndarray
    b_in: np.ndarray
    b_plus: np.ndarray
    b_minus: np.ndarray
    src: np.ndarray
    tgt: np.ndarray

    @property
    def n_bus(self):
        return self.b_out.shape[0]

    @property
    def n_line(self):
        return self.b_out.shape[1]


def build_incidence(topology: GridTopology) -> IncidenceSet:
    n, e = topology.n_bus, topology.n_line
    src, tgt = topology.src, topology.tgt
    cols = np.arange(e)
    b_out = np.zeros((n, e))
    b_in = np.zeros((n, e))
    b_out[src, cols] = 1.0
    b_in[tgt, cols] = 1.0
    return IncidenceSet(
        b_out=_frozen(b_out),
        b_in=_frozen(b_in),
        b_plus=_frozen(b_in + b_out),
        b_minus=_frozen(b_in - b_out),
        src=_frozen(src, np.intp),
        tgt=_frozen(tgt, np.intp),
    )


@dataclass(frozen=True)
class AdmittanceParams:
    """Trainable line parameters plus bus shunts.

    Line conductance is ``exp(gamma)`` and susceptance ``-exp(beta)``, so signs
    stay physical whatever values the optimizer produces. Shunts are stored
    directly in per-unit and are frozen unless listed in ``trainable``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    shunt_g: np.ndarray
    shunt_b: np.ndarray
    trainable: frozenset = field(default=LINE_GROUPS)

    def __post_init__(self):
        for name in PARAM_GROUPS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "trainable", frozenset(self.trainable))
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be vectors of equal length")
        if self.shunt_g.shape != self.shunt_b.shape or self.shunt_g.ndim != 1:
            raise ValueError("shunt_g and shunt_b must be vectors of equal length")
        unknown = self.trainable - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n_line(self):
        return self.gamma.shape[0]

    @property
    def n_bus(self):
        return self.shunt_g.shape[0]

    def groups(self):
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def with_groups(self, **groups) -> "AdmittanceParams":
        values = self.groups()
        values.update(groups)
        return AdmittanceParams(trainable=self.trainable, **values)

    def with_trainable(self, trainable) -> "AdmittanceParams":
        return AdmittanceParams(trainable=frozenset(trainable), **self.groups())


@dataclass(frozen=True)
class RxParams:
    r: np.ndarray
    x: np.ndarray


def line_admittances(params: AdmittanceParams):
    """Return the line conductances and susceptances ``(g, b)``."""
    return np.exp(params.gamma), -np.exp(params.beta)


def log_params_from_admittances(g, b):
    g = np.asarray(g, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(g > 0)):
        bad = np.flatnonzero(~(g > 0)).tolist()
        raise NonPositiveConductance(f"conductance must be > 0 on lines {bad}")
    if np.any(~(b < 0)):
        bad = np.flatnonzero(~(b < 0)).tolist()
        raise NonNegativeSusceptance(f"susceptance must be < 0 on lines {bad}")
    return np.log(g), np.log(-b)


def admittances_from_rx(params: RxParams):
    r = np.asarray(params.r, dtype=float)
    x = np.asarray(params.x, dtype=float)
    z2 = r * r + x * x
    if np.any(z2 == 0):
        bad = np.flatnonzero(z2 == 0).tolist()
        raise DegenerateImpedance(f"zero series impedance on lines {bad}")
    return r / z2, -x / z2


def rx_regularizer(params: RxParams, lam: float) -> float:
    """Hinge penalty ``lam * sum(max(0, -r) + max(0, -x))``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    r = np.asarray(params.r, dtype=float)
    x = np.asarray(params.x, dtype=float)
    return float(lam * (np.maximum(0.0, -r).sum() + np.maximum(0.0, -x).sum()))


def admittance_matrix(params: AdmittanceParams, incidence: IncidenceSet) -> np.ndarray:
    if params.n_line != incidence.n_line or params.n_bus != incidence.n_bus:
        raise ValueError("parameter and incidence dimensions disagree")
    g, b = line_admittances(params)
    y = g + 1j * b
    n = incidence.n_bus
    src, tgt = incidence.src, incidence.tgt
    ymat = np.zeros((n, n), dtype=complex)
    # mirrored scatters in the same order keep the result bitwise symmetric
    np.add.at(ymat, (src, tgt), -y)
    np.add.at(ymat, (tgt, src), -y)
    diag = np.asarray(params.shunt_g + 1j * params.shunt_b, dtype=complex)
    diag = diag.copy()
    np.add.at(diag, src, y)
    np.add.at(diag, tgt, y)
    ymat[np.arange(n), np.arange(n)] += diag
    return ymat


def params_from_admittances(g, b, shunt_g, shunt_b, trainable=LINE_GROUPS):
    gamma, beta = log_params_from_admittances(g, b)
    return AdmittanceParams(gamma, beta, shunt_g, shunt_b, trainable=trainable)
