import numpy as np
import pytest

from diffpf.caseio import load_case
from diffpf.network import AdmittanceParams, BusKind, GridTopology
from diffpf.powerflow import PfInputBatch, StateBatch


def random_grid(n_bus, seed, extra_lines=2, n_gen=None):
    """Connected random grid: spanning tree plus a few chords, mixed PV/PQ buses."""
    rng = np.random.default_rng(seed)
    lines = [(int(rng.integers(0, i)), i) for i in range(1, n_bus)]
    have = {tuple(sorted(l)) for l in lines}
    for _ in range(extra_lines * 10):
        if len(lines) >= n_bus - 1 + extra_lines:
            break
        s, t = (int(x) for x in rng.choice(n_bus, 2, replace=False))
        if tuple(sorted((s, t))) not in have:
            have.add(tuple(sorted((s, t))))
            lines.append((s, t))
    if n_gen is None:
        n_gen = max(1, (n_bus - 1) // 2) if n_bus > 2 else 0
    kinds = [BusKind.SLACK] + [BusKind.LOAD] * (n_bus - 1)
    for i in rng.choice(np.arange(1, n_bus), n_gen, replace=False) if n_gen else []:
        kinds[int(i)] = BusKind.GENERATOR
    topo = GridTopology(kinds, lines, name=f"rand{n_bus}")
    e = topo.n_line
    params = AdmittanceParams(
        gamma=np.log(rng.uniform(1.0, 5.0, e)),
        beta=np.log(rng.uniform(5.0, 15.0, e)),
        shunt_g=rng.uniform(0.0, 0.02, n_bus),
        shunt_b=rng.uniform(0.0, 0.05, n_bus),
    )
    return topo, params


def random_state(topo, n_samples, seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.9, 1.1, (topo.n_bus, n_samples))
    theta = rng.uniform(-0.3, 0.3, (topo.n_bus, n_samples))
    return StateBatch(v, theta)


def random_inputs(topo, n_samples, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    return PfInputBatch(
        v_g=rng.uniform(0.98, 1.05, (len(topo.gen_idx), n_samples)),
        p=rng.uniform(-scale, scale, (topo.n_bus - 1, n_samples)),
        q_l=rng.uniform(-scale / 2, scale / 4, (len(topo.load_idx), n_samples)),
    )


@pytest.fixture(scope="session")
def ieee14():
    return load_case("ieee14")


@pytest.fixture(scope="session")
def case5():
    return load_case("case5")


@pytest.fixture(scope="session")
def case2():
    return load_case("case2")


# one PASS/FAIL line per acceptance criterion, shown in the terminal summary
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])
