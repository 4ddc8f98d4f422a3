import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from diffpf import caseio
from diffpf.caseio import (
    DatasetFile,
    append_metrics,
    load_case,
    parse_case,
    read_dataset,
    read_metrics,
    read_params,
    write_dataset,
    write_params,
)
from diffpf.errors import (
    CaseSyntaxError,
    MissingSection,
    SchemaMismatch,
    ShapeMismatch,
    TopologyMismatch,
)
from diffpf.estimator import MetricsRecord
from diffpf.network import AdmittanceParams, BusKind, GridTopology, line_admittances

from .mutations import MUTATIONS

TWO_BUS = """
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0;
  2 1 50 20 0 0;
];
mpc.gen = [1 50 20 100 -100 1];
mpc.branch = [
  1 2 0.01 0.1 0;
];
"""


def test_two_bus_minimal():
    case = parse_case(TWO_BUS)
    topo = case.topology
    assert topo.kinds == (BusKind.SLACK, BusKind.LOAD)
    assert topo.n_line == 1
    g, b = line_admittances(case.params)
    assert g[0] == pytest.approx(0.990099, rel=1e-5)
    assert b[0] == pytest.approx(-9.90099, rel=1e-5)
    assert case.base.pd[1] == pytest.approx(0.5)
    assert case.base.qd[1] == pytest.approx(0.2)


def test_out_of_service_branch_dropped():
    text = TWO_BUS.replace("1 2 0.01 0.1 0;",
                           "1 2 0.01 0.1 0 0 0 0 0 0 1;\n  2 1 0.02 0.2 0 0 0 0 0 0 0;")
    case = parse_case(text)
    assert case.topology.n_line == 1


def test_missing_bus_section():
    with pytest.raises(MissingSection):
        parse_case(TWO_BUS.replace("mpc.bus", "mpc.busx"))


def test_charging_and_shunts_to_bus_shunts():
    text = TWO_BUS.replace("2 1 50 20 0 0;", "2 1 50 20 3 4;").replace(
        "1 2 0.01 0.1 0;", "1 2 0.01 0.1 0.2;")
    p = parse_case(text).params
    np.testing.assert_allclose(p.shunt_g, [0.0, 0.03])
    np.testing.assert_allclose(p.shunt_b, [0.1, 0.14])


def test_comments_continuations_and_row_separators():
    text = """function mpc = tiny
% header comment
mpc.version = '2';
mpc.baseMVA = 100;  % trailing
mpc.bus = [1 3 0 0 0 0; 2 1 50 ...
 20 0 0];
mpc.gen = [1 50 20 100 -100 1];
mpc.branch = [1 2 0.01 0.1 0];
mpc.gencost = [2 0 0 3 0 0 0];
"""
    case = parse_case(text)
    assert case.topology.n_bus == 2
    assert any("gencost" in w for w in case.warnings)


def test_slack_reordered_to_index_zero():
    text = TWO_BUS.replace("1 3 0 0 0 0;", "1 1 0 0 0 0;").replace("2 1 50 20 0 0;", "2 3 50 20 0 0;")
    text = text.replace("mpc.gen = [1 ", "mpc.gen = [2 ")
    case = parse_case(text)
    assert case.topology.labels == (2, 1)
    assert case.topology.kinds[0] is BusKind.SLACK


def test_pv_bus_without_gen_is_demoted():
    text = TWO_BUS.replace("2 1 50 20 0 0;", "2 2 50 20 0 0;")
    case = parse_case(text)
    assert case.topology.kinds[1] is BusKind.LOAD
    assert case.warnings


@pytest.mark.parametrize("name,n_bus,n_line", [("ieee14", 14, 20), ("ieee118", 118, 186),
                                               ("case5", 5, 7), ("2bus", 2, 1)])
def test_bundled_cases_parse(name, n_bus, n_line):
    case = load_case(name)
    assert case.topology.n_bus == n_bus
    assert case.topology.n_line == n_line


@pytest.mark.parametrize("name,mutate,exc", MUTATIONS, ids=[m[0] for m in MUTATIONS])
def test_mutation_positioned_error(name, mutate, exc):
    text = open(caseio.bundled_case_path("ieee14")).read()
    with pytest.raises(exc) as info:
        parse_case(mutate(text))
    assert isinstance(info.value, CaseSyntaxError)
    assert info.value.line is not None and info.value.column is not None


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.data())
def test_parser_total_on_random_edits(data):
    text = open(caseio.bundled_case_path("case5")).read()
    pos = data.draw(st.integers(0, len(text)))
    cut = data.draw(st.integers(0, 20))
    insert = data.draw(st.text(alphabet="0123456789.;[]=%-e \n\tmpcabus'", max_size=6))
    mutated = text[:pos] + insert + text[pos + cut:]
    try:
        parse_case(mutated)
    except CaseSyntaxError as exc:
        assert exc.line is not None


def _tiny_dataset(n=3, hidden=True, seed=0):
    rng = np.random.default_rng(seed)
    gen, load = np.array([1, 3]), np.array([2])
    return DatasetFile(
        header={"case": "x", "n_samples": n, "seed": 7, "split_rule": "every_kth:2"},
        sample_ids=np.arange(n, dtype=np.int64),
        split=["train" if i % 2 == 0 else "valid" for i in range(n)],
        gen_buses=gen, load_buses=load,
        gen_v=rng.random((2, n)), gen_theta=rng.standard_normal((2, n)),
        gen_p=rng.standard_normal((2, n)) * 1e-7, gen_q=rng.standard_normal((2, n)) / 3,
        load_p=-rng.random((1, n)), load_q=rng.random((1, n)) * np.pi,
        hidden_v=rng.random((1, n)) if hidden else None,
        hidden_theta=rng.random((1, n)) if hidden else None,
    )


def _assert_same(a, b):
    assert a.header == b.header
    assert a.split == b.split
    for f in ("sample_ids", "gen_buses", "load_buses", "gen_v", "gen_theta", "gen_p", "gen_q",
              "load_p", "load_q", "hidden_v", "hidden_theta"):
        x, y = getattr(a, f), getattr(b, f)
        if x is None:
            assert y is None
        else:
            assert np.array_equal(x, y), f


@pytest.mark.parametrize("hidden", [True, False])
def test_dataset_round_trip(tmp_path, hidden):
    ds = _tiny_dataset(hidden=hidden)
    write_dataset(tmp_path / "d.csv", ds)
    _assert_same(ds, read_dataset(tmp_path / "d.csv"))


def test_dataset_write_is_byte_deterministic(tmp_path):
    write_dataset(tmp_path / "a.csv", _tiny_dataset())
    write_dataset(tmp_path / "b.csv", _tiny_dataset())
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_dataset_empty(tmp_path):
    ds = _tiny_dataset(n=0)
    write_dataset(tmp_path / "d.csv", ds)
    back = read_dataset(tmp_path / "d.csv")
    assert back.n_samples == 0 and back.header["n_samples"] == 0


def test_dataset_missing_load_column(tmp_path):
    path = tmp_path / "d.csv"
    write_dataset(path, _tiny_dataset())
    lines = path.read_text().splitlines()
    lines[3] = ",".join(lines[3].split(",")[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ShapeMismatch):
        read_dataset(path)


@pytest.mark.parametrize("corrupt", [
    lambda ls: ["not json"] + ls[1:],
    lambda ls: ['{"case": "x"}'] + ls[1:],
    lambda ls: [ls[0], ls[1].replace("g1_theta", "g1_bogus")] + ls[2:],
    lambda ls: ls[:-1],
    lambda ls: ls[:2] + [ls[2].replace("train", "test")] + ls[3:],
])
def test_dataset_schema_errors(tmp_path, corrupt):
    path = tmp_path / "d.csv"
    write_dataset(path, _tiny_dataset())
    path.write_text("\n".join(corrupt(path.read_text().splitlines())) + "\n")
    with pytest.raises(SchemaMismatch):
        read_dataset(path)


def test_dataset_topology_check(tmp_path, case5):
    path = tmp_path / "d.csv"
    write_dataset(path, _tiny_dataset())
    with pytest.raises(ShapeMismatch):
        read_dataset(path, case5.topology)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=6, max_size=6))
@settings(max_examples=100, deadline=None)
def test_dataset_values_round_trip_exactly(tmp_path_factory, vals):
    ds = _tiny_dataset(n=1)
    ds.gen_v = np.array(vals[:2])[:, None]
    ds.gen_q = np.array(vals[2:4])[:, None]
    ds.hidden_v = np.array(vals[4:5])[:, None]
    ds.load_p = np.array(vals[5:6])[:, None]
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(path, ds)
    _assert_same(ds, read_dataset(path))


def test_params_round_trip(tmp_path, ieee14):
    rng = np.random.default_rng(1)
    p = ieee14.params.with_groups(gamma=ieee14.params.gamma + rng.standard_normal(20) / 3)
    write_params(tmp_path / "p.json", p, ieee14.topology)
    q = read_params(tmp_path / "p.json", ieee14.topology)
    for name in ("gamma", "beta", "shunt_g", "shunt_b"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert q.trainable == p.trainable


def test_params_zero_logs(tmp_path):
    topo = GridTopology([BusKind.SLACK, BusKind.LOAD], [(0, 1)])
    write_params(tmp_path / "p.json", AdmittanceParams([0.0], [0.0], [0, 0], [0, 0]), topo)
    g, b = line_admittances(read_params(tmp_path / "p.json"))
    assert g.tolist() == [1.0] and b.tolist() == [-1.0]


def test_params_topology_mismatch(tmp_path, case5):
    kinds = list(case5.topology.kinds) + [BusKind.LOAD]
    six = GridTopology(kinds, list(case5.topology.lines) + [(4, 5)])
    write_params(tmp_path / "p.json", case5.params, case5.topology)
    with pytest.raises(TopologyMismatch):
        read_params(tmp_path / "p.json", six)


def test_metrics_append(tmp_path):
    path = tmp_path / "m.csv"
    append_metrics(path, MetricsRecord(0, 0.5, 1.0, None, None))
    assert path.read_text().splitlines() == ["epoch,loss,are,valid_err,elapsed_s", "0,0.5,1,,"]
    append_metrics(path, MetricsRecord(1, 0.25, 0.9, 1e-3, 2.0))
    rows = read_metrics(path)
    assert [r["epoch"] for r in rows] == [0, 1]
    assert rows[0]["valid_err"] is None
    assert rows[1]["valid_err"] == 1e-3
