"""Generator-side loss, reconstruction/validation metrics, Adam and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import caseio
from .errors import Diverged, EmptyTrainSet, MissingGroundTruth, SingularJacobian, ZeroNormalizer
from .gradients import LOSS_TERMS, forward_loss, loss_and_gradient
from .network import AdmittanceParams, GridTopology, admittance_matrix
from .powerflow import nr_solve
from .seeding import substream

log = logging.getLogger(__name__)

DEFAULT_TERMS = frozenset({"theta_g", "q_g", "p_g"})
# the loss as literally printed: pinned generator voltages, phases, active powers
LITERAL_TERMS = frozenset({"v_g", "theta_g", "p_g"})
DIVERGE_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    terms: frozenset = DEFAULT_TERMS
    n: int = 3

    def __post_init__(self):
        terms = frozenset(self.terms)
        object.__setattr__(self, "terms", terms)
        if not terms or not terms <= set(LOSS_TERMS):
            raise ValueError(f"loss terms must be a nonempty subset of {LOSS_TERMS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @classmethod
    def parse(cls, text, n=3):
        if text == "default":
            return cls(DEFAULT_TERMS, n)
        if text == "literal":
            return cls(LITERAL_TERMS, n)
        return cls(frozenset(t.strip() for t in text.split(",") if t.strip()), n)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 80000
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n: int = 3
    eval_every: int = 1000
    terms: frozenset = DEFAULT_TERMS
    record_elapsed: bool = True
    stop_on_are_rise: bool = False
    are_window: int = 1000
    diverge_factor: float = 1e6

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        object.__setattr__(self, "terms", frozenset(self.terms))

    @property
    def loss_spec(self):
        return LossSpec(self.terms, self.n)


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    are: float = None
    valid_err: float = None
    elapsed_s: float = None


def _batch(samples, topology, cols=None):
    if isinstance(samples, caseio.DatasetFile):
        return samples.inputs(topology, cols), samples.targets(cols)
    inputs, targets = samples
    if cols is not None:
        return inputs.take(cols), targets.take(cols)
    return inputs, targets


def loss(params, samples, n, loss_spec, topology):
    """Mean squared generator residual after ``n`` Newton steps, normalized by ``N * n_gen``."""
    inputs, targets = _batch(samples, topology)
    return forward_loss(params, inputs, targets, n, loss_spec, topology)[0]


def reconstruction_error(params, ref_params, init_params, topology):
    """Frobenius distance to the reference admittance matrix, relative to the initial one."""
    inc = topology.incidence
    y_ref = admittance_matrix(ref_params, inc)
    norm0 = np.linalg.norm(admittance_matrix(init_params, inc) - y_ref)
    if norm0 == 0:
        raise ZeroNormalizer("initial parameters equal the reference exactly")
    return float(np.linalg.norm(admittance_matrix(params, inc) - y_ref) / norm0)


def validation_error(params, samples, n, topology, chunk=512):
    """Squared state/reactive-power error over all buses, normalized by ``N * n_bus``."""
    if not samples.has_ground_truth:
        raise MissingGroundTruth("dataset has no hidden load states")
    gen, load = topology.gen_idx, topology.load_idx
    total = 0.0
    n_samples = samples.n_samples
    if n_samples == 0:
        raise ValueError("validation set is empty")
    for start in range(0, n_samples, chunk):
        cols = np.arange(start, min(start + chunk, n_samples))
        out = nr_solve(samples.inputs(topology, cols), params, topology, n)
        parts = (
            out.theta[gen] - samples.gen_theta[:, cols],
            out.q_g - samples.gen_q[:, cols],
            out.theta[load] - samples.hidden_theta[:, cols],
            out.v[load] - samples.hidden_v[:, cols],
        )
        total += sum(float(np.sum(d * d)) for d in parts)
    return total / (n_samples * topology.n_bus)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: AdmittanceParams, grad, config: TrainConfig):
    """One bias-corrected Adam update of every group present in ``grad``."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    m_new, u_new, updated = dict(state.m), dict(state.u), {}
    for name, g in grad.groups().items():
        m = state.m.get(name, np.zeros_like(g))
        u = state.u.get(name, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        u = b2 * u + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        u_hat = u / (1.0 - b2**t)
        updated[name] = getattr(params, name) - config.lr * m_hat / (np.sqrt(u_hat) + config.eps)
        m_new[name], u_new[name] = m, u
    return AdamState(m_new, u_new, t), params.with_groups(**updated)


def perturb_params(ref: AdmittanceParams, sigma, seed):
    """Multiplicative lognormal perturbation of line admittances (additive in log space)."""
    rng = substream(seed, "init")
    e = ref.n_line
    return ref.with_groups(
        gamma=ref.gamma + sigma * rng.standard_normal(e),
        beta=ref.beta + sigma * rng.standard_normal(e),
    )


def train(dataset, topology: GridTopology, init_params, config: TrainConfig, ref_params=None,
          metrics_path=None, on_epoch=None):
    """Fit admittances by Adam on shuffled mini-batches of the training split.

    Returns the final parameters and the per-epoch :class:`MetricsRecord` list.
    ``on_epoch(record, params)`` is called after every epoch.
    """
    dataset.check_topology(topology)
    train_idx = dataset.indices("train")
    valid_idx = dataset.indices("valid")
    if train_idx.size == 0:
        raise EmptyTrainSet("dataset has no training samples")
    if config.batch_size > train_idx.size:
        raise ValueError(
            f"batch size {config.batch_size} exceeds training set size {train_idx.size}"
        )
    valid = dataset.subset(valid_idx) if valid_idx.size and dataset.has_ground_truth else None
    inputs = dataset.inputs(topology)
    targets = dataset.targets()
    spec = config.loss_spec
    rng = substream(config.seed, "shuffle")
    params = init_params
    opt = AdamState()
    history = []
    initial_loss = None
    n_train = train_idx.size
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(n_train)]
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n_train, config.batch_size)):
            cols = order[start:start + config.batch_size]
            try:
                batch_loss, grad = loss_and_gradient(
                    params, (inputs.take(cols), targets.take(cols)), config.n, spec, topology
                )
            except SingularJacobian as exc:
                raise SingularJacobian(
                    int(cols[exc.sample]), exc.step, exc.condition,
                    context=f"epoch {epoch}, batch {bi}",
                ) from None
            epoch_loss += batch_loss * len(cols)
            opt, params = adam_step(opt, params, grad, config)
        epoch_loss /= n_train

        if initial_loss is None:
            initial_loss = epoch_loss
        # the floor keeps a run started at the optimum from tripping on round-off
        if not np.isfinite(epoch_loss) or epoch_loss > config.diverge_factor * max(
            initial_loss, DIVERGE_FLOOR
        ):
            raise Diverged(f"loss {epoch_loss:.3e} at epoch {epoch} (initial {initial_loss:.3e})")

        rec = MetricsRecord(epoch=epoch, loss=epoch_loss)
        if ref_params is not None:
            rec.are = reconstruction_error(params, ref_params, init_params, topology)
        stop = config.stop_on_are_rise and _are_rising(history + [rec], config.are_window)
        last = stop or epoch == config.epochs - 1
        if valid is not None and ((epoch + 1) % config.eval_every == 0 or last):
            rec.valid_err = validation_error(params, valid, config.n, topology)
        if config.record_elapsed:
            rec.elapsed_s = time.perf_counter() - t0
        history.append(rec)
        if metrics_path is not None:
            caseio.append_metrics(metrics_path, rec)
        if on_epoch is not None:
            on_epoch(rec, params)
        if stop:
            log.info("stopping at epoch %d: ARE rising while loss falls", epoch)
            break
    return params, history


def _are_rising(history, window):
    if len(history) <= window or history[-1].are is None:
        return False
    old, new = history[-1 - window], history[-1]
    return new.are > old.are and new.loss < old.loss


def with_epochs(config: TrainConfig, epochs) -> TrainConfig:
    return replace(config, epochs=epochs)
