"""Synthetic operating scenarios, ground-truth measurements and train/validation splits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .caseio import Case, DatasetFile
from .errors import EmptyTrainSet, GenerationFailed, NoConvergence, SingularJacobian
from .powerflow import PfInputBatch, StateBatch, compute_injections, nr_converge
from .seeding import substream

log = logging.getLogger(__name__)

# stand-ins for the graded data sets #1..#5: increasing load spread
CASE_SPREADS = (0.05, 0.10, 0.15, 0.20, 0.25)


@dataclass(frozen=True)
class ScenarioConfig:
    n_samples: int = 2000
    load_spread: float = 0.2
    q_spread: float = None  # defaults to load_spread
    vg_spread: float = 0.02
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 50
    max_retries: int = 20

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        for name in ("load_spread", "vg_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.q_spread is not None and self.q_spread < 0:
            raise ValueError("q_spread must be >= 0")

    @property
    def reactive_spread(self):
        return self.load_spread if self.q_spread is None else self.q_spread


def _draw(case: Case, config: ScenarioConfig, rng, count):
    """Draw ``count`` scenarios; columns of a :class:`PfInputBatch` plus the load factors."""
    topo, base = case.topology, case.base
    n = topo.n_bus
    gen = topo.gen_idx
    pf = rng.uniform(1 - config.load_spread, 1 + config.load_spread, (n, count))
    qf = rng.uniform(1 - config.reactive_spread, 1 + config.reactive_spread, (n, count))
    vg_shift = rng.uniform(-config.vg_spread, config.vg_spread, (len(gen), count))
    pd = base.pd[:, None] * pf
    qd = base.qd[:, None] * qf
    # proportional generator rescaling keeps the active balance; slack absorbs losses
    # same reduction on same-shaped arrays: ratio is exactly 1 when all factors are 1
    total_base = np.repeat(base.pd[:, None], count, axis=1).sum(axis=0)
    total = pd.sum(axis=0)
    ratio = np.divide(total, total_base, out=np.ones(count), where=total_base != 0)
    pg = base.pg[:, None] * ratio[None, :]
    p = pg - pd
    q = base.qg[:, None] - qd
    inputs = PfInputBatch(
        v_g=base.vg[gen][:, None] + vg_shift,
        p=p[1:],
        q_l=q[topo.load_idx],
    )
    return inputs, pf


def sample_scenarios(case: Case, config: ScenarioConfig, rng=None):
    """Return a :class:`PfInputBatch` with ``config.n_samples`` seeded scenarios."""
    rng = substream(config.seed, "scenario") if rng is None else rng
    inputs, _ = _draw(case, config, rng, config.n_samples)
    return inputs


def _merge(dst: PfInputBatch, src: PfInputBatch, cols):
    dst.v_g[:, cols] = src.v_g
    dst.p[:, cols] = src.p
    dst.q_l[:, cols] = src.q_l


def generate_dataset(case: Case, config: ScenarioConfig, ref_params=None, chunk=256):
    """Solve every scenario to ``config.tol`` and record observable and hidden blocks.

    Scenarios that fail to converge are redrawn from the same stream, at most
    ``config.max_retries`` rounds; the number of redraws goes into the header.
    """
    topo = case.topology
    params = case.params if ref_params is None else ref_params
    rng = substream(config.seed, "scenario")
    inputs = sample_scenarios(case, config, rng)
    n = config.n_samples
    v = np.zeros((topo.n_bus, n))
    theta = np.zeros((topo.n_bus, n))
    pending = np.arange(n)
    resampled = 0
    for attempt in range(config.max_retries + 1):
        failed = []
        for start in range(0, pending.size, chunk):
            cols = pending[start:start + chunk]
            sub = inputs.take(cols)
            ok = np.ones(cols.size, dtype=bool)
            while True:
                try:
                    out, _ = nr_converge(
                        sub.take(np.flatnonzero(ok)), params, topo, config.tol, config.max_iter
                    )
                    break
                except NoConvergence as exc:
                    ok[np.flatnonzero(ok)[exc.failed]] = False
                except SingularJacobian as exc:
                    ok[np.flatnonzero(ok)[exc.sample]] = False
                if not ok.any():
                    out = None
                    break
            good = cols[ok]
            if out is not None:
                v[:, good] = out.v
                theta[:, good] = out.theta
            failed.extend(cols[~ok].tolist())
        if not failed:
            break
        if attempt == config.max_retries:
            raise GenerationFailed(
                f"{len(failed)} scenarios still unsolved after {config.max_retries} redraws"
            )
        pending = np.array(failed, dtype=np.intp)
        resampled += pending.size
        fresh, _ = _draw(case, config, rng, pending.size)
        _merge(inputs, fresh, pending)

    p_calc, q_calc = compute_injections(StateBatch(v, theta), params, topo)
    gen, load = topo.gen_idx, topo.load_idx
    header = {
        "case": case.name,
        "n_samples": n,
        "seed": config.seed,
        "split_rule": None,
        "load_spread": config.load_spread,
        "q_spread": config.reactive_spread,
        "vg_spread": config.vg_spread,
        "tol": config.tol,
        "resampled": int(resampled),
    }
    return DatasetFile(
        header=header,
        sample_ids=np.arange(n, dtype=np.int64),
        split=[""] * n,
        gen_buses=gen,
        load_buses=load,
        gen_v=v[gen].copy(),
        gen_theta=theta[gen].copy(),
        gen_p=inputs.p[gen - 1].copy(),
        gen_q=q_calc[gen].copy(),
        load_p=inputs.p[load - 1].copy(),
        load_q=inputs.q_l.copy(),
        hidden_v=v[load].copy(),
        hidden_theta=theta[load].copy(),
    )


def parse_split_rule(rule):
    """``"every_kth:50"`` / ``"fraction:0.1"`` -> ``("every_kth", 50)`` / ``("fraction", 0.1)``."""
    if isinstance(rule, tuple):
        return rule
    kind, _, arg = str(rule).partition(":")
    if kind == "every_kth":
        return kind, int(arg)
    if kind == "fraction":
        return kind, float(arg)
    raise ValueError(f"unknown split rule {rule!r}")


def split_dataset(ds: DatasetFile, rule=("every_kth", 50)) -> DatasetFile:
    """Tag samples train/valid. ``every_kth(k)``: index % k == 0 trains;
    ``fraction(f)``: the first ``ceil(f * N)`` samples train."""
    kind, arg = parse_split_rule(rule)
    n = ds.n_samples
    if kind == "every_kth":
        if arg < 1:
            raise ValueError("k must be >= 1")
        train = [i % arg == 0 for i in range(n)]
    else:
        if not 0 <= arg <= 1:
            raise ValueError("fraction must lie in [0, 1]")
        cut = math.ceil(arg * n)
        train = [i < cut for i in range(n)]
    if not any(train):
        raise EmptyTrainSet(f"split rule {kind}:{arg} leaves no training samples")
    if all(train):
        log.warning("split rule %s:%s leaves an empty validation set", kind, arg)
    out = ds.subset(np.arange(n))
    out.split = ["train" if t else "valid" for t in train]
    out.header = dict(ds.header)
    out.header["split_rule"] = f"{kind}:{arg}"
    out.header["n_train"] = int(sum(train))
    out.header["n_valid"] = int(n - sum(train))
    return out
