"""MATPOWER-subset case parsing and the dataset, parameter and metrics file formats.

Case grammar: statements ``mpc.<name> = <scalar | 'string' | matrix>;`` with
``[ ... ]`` matrices whose rows are separated by ``;`` or newlines, ``%``
comments to end of line, and an optional leading ``function`` line. Only
``baseMVA``, ``bus``, ``gen`` and ``branch`` are interpreted, using the
standard MATPOWER column positions.

Dataset files are a JSON header line followed by CSV (LF line endings).
CSV columns, ``b`` being the dense bus index:

* ``sample``, ``split`` (``train``, ``valid`` or empty)
* per generator bus: ``g{b}_v, g{b}_theta, g{b}_p, g{b}_q``
* per load bus: ``l{b}_p, l{b}_q``
* optional hidden ground truth per load bus: ``h{b}_v, h{b}_theta``
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CaseSyntaxError,
    DanglingBranch,
    DuplicateBusId,
    MissingSection,
    MultipleSlackBuses,
    NoSlackBus,
    SchemaMismatch,
    ShapeMismatch,
    TopologyError,
    TopologyMismatch,
)
from .network import (
    PARAM_GROUPS,
    AdmittanceParams,
    BusKind,
    GridTopology,
    RxParams,
    admittances_from_rx,
    log_params_from_admittances,
)

log = logging.getLogger(__name__)

FLOAT_FMT = ".17g"
PARAMS_FORMAT = "diffpf.params"
METRICS_COLUMNS = ("epoch", "loss", "are", "valid_err", "elapsed_s")
DATASET_HEADER_KEYS = ("case", "n_samples", "seed", "split_rule")

# MATPOWER column positions
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VA = 0, 1, 2, 3, 4, 5, 7, 8
GEN_BUS, PG, QG, VG, GEN_STATUS = 0, 1, 2, 5, 7
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10
MIN_COLS = {"bus": 6, "gen": 6, "branch": 5}
TYPE_KIND = {1: BusKind.LOAD, 2: BusKind.GENERATOR, 3: BusKind.SLACK}


def _fmt(x):
    return format(float(x), FLOAT_FMT)


# --------------------------------------------------------------------------- lexer

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+|\.\.\.[^\n]*\n)
  | (?P<comment>%[^\n]*)
  | (?P<newline>\n)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?(?:Inf|inf|NaN|nan)\b)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<string>'[^'\n]*')
  | (?P<punct>[=\[\];,.])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text):
    toks = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise CaseSyntaxError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "newline" or (kind == "ws" and m.group().endswith("\n")):
            if kind == "newline":
                toks.append(_Tok("newline", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


@dataclass
class _Matrix:
    rows: list
    row_pos: list
    line: int
    col: int


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def next(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind, text=None):
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text if text is not None else kind
            got = tok.text if tok.kind != "eof" else "end of input"
            raise CaseSyntaxError(f"expected {want!r}, found {got!r}", tok.line, tok.col)
        return tok

    def skip_separators(self):
        while self.peek().kind == "newline" or self.peek().text in (";", ","):
            self.next()

    def statements(self):
        out = {}
        while True:
            self.skip_separators()
            tok = self.peek()
            if tok.kind == "eof":
                return out
            if tok.kind == "ident" and tok.text == "function":
                while self.peek().kind not in ("newline", "eof"):
                    self.next()
                continue
            self.expect("ident", "mpc")
            self.expect("punct", ".")
            name_tok = self.expect("ident")
            self.expect("punct", "=")
            value = self.value()
            end = self.next()
            if end.kind not in ("newline", "eof") and end.text != ";":
                raise CaseSyntaxError(
                    f"expected ';' after mpc.{name_tok.text}", end.line, end.col
                )
            if name_tok.text in out:
                raise CaseSyntaxError(
                    f"mpc.{name_tok.text} assigned twice", name_tok.line, name_tok.col
                )
            out[name_tok.text] = (value, name_tok)

    def value(self):
        tok = self.peek()
        if tok.kind == "number":
            self.next()
            return float(tok.text)
        if tok.kind == "string":
            self.next()
            return tok.text[1:-1]
        if tok.text == "[":
            return self.matrix()
        got = tok.text if tok.kind != "eof" else "end of input"
        raise CaseSyntaxError(f"expected a value, found {got!r}", tok.line, tok.col)

    def matrix(self):
        open_tok = self.expect("punct", "[")
        rows, row_pos, row, pos = [], [], [], None
        while True:
            tok = self.next()
            if tok.kind == "number":
                if not row:
                    pos = (tok.line, tok.col)
                row.append(float(tok.text))
            elif tok.text == ",":
                continue
            elif tok.kind == "newline" or tok.text in (";", "]"):
                if row:
                    if rows and len(row) != len(rows[0]):
                        raise CaseSyntaxError(
                            f"row has {len(row)} columns, expected {len(rows[0])}", *pos
                        )
                    rows.append(row)
                    row_pos.append(pos)
                    row = []
                if tok.text == "]":
                    return _Matrix(rows, row_pos, open_tok.line, open_tok.col)
            else:
                got = tok.text if tok.kind != "eof" else "end of input"
                raise CaseSyntaxError(f"unexpected {got!r} inside matrix", tok.line, tok.col)


# --------------------------------------------------------------------------- case model


@dataclass
class OperatingPoint:
    """Base-case set-points and demands in per-unit, indexed by dense bus id."""

    pd: np.ndarray
    qd: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    vg: np.ndarray

    def net_p(self):
        return self.pg - self.pd

    def net_q(self):
        return self.qg - self.qd

    def inputs(self, topology):
        from .powerflow import PfInputBatch

        return PfInputBatch(
            v_g=self.vg[topology.gen_idx][:, None],
            p=self.net_p()[1:][:, None],
            q_l=self.net_q()[topology.load_idx][:, None],
        )


@dataclass
class Case:
    name: str
    topology: GridTopology
    base: OperatingPoint
    params: AdmittanceParams
    warnings: list = field(default_factory=list)


def _matrix(stmts, name, eof, min_cols):
    if name not in stmts:
        raise MissingSection(f"missing mpc.{name}", eof.line, eof.col)
    value, tok = stmts[name]
    if not isinstance(value, _Matrix):
        raise CaseSyntaxError(f"mpc.{name} must be a matrix", tok.line, tok.col)
    if value.rows and len(value.rows[0]) < min_cols:
        raise CaseSyntaxError(
            f"mpc.{name} needs at least {min_cols} columns, found {len(value.rows[0])}",
            *value.row_pos[0],
        )
    return value


def _int_field(x, what, pos):
    if not (math.isfinite(x) and x == int(x)):
        raise CaseSyntaxError(f"{what} must be an integer, found {x!r}", *pos)
    return int(x)


def _status(row, col, pos):
    if len(row) <= col:
        return 1
    s = row[col]
    if s not in (0.0, 1.0):
        raise CaseSyntaxError(f"status must be 0 or 1, found {s!r}", *pos)
    return int(s)


def _check_finite(mat, name):
    for row, pos in zip(mat.rows, mat.row_pos):
        if not all(math.isfinite(x) for x in row):
            raise CaseSyntaxError(f"non-finite entry in mpc.{name}", *pos)


def parse_case(text, name="case", min_r_ratio=1e-3):
    """Parse case text into a :class:`Case` (topology, base point, admittances).

    The slack bus becomes dense index 0; the other buses keep file order. A
    zero-resistance branch gets ``r = min_r_ratio * |x|`` so that its
    conductance stays positive, as the log-parameterization requires.
    """
    parser = _Parser(text)
    stmts = parser.statements()
    eof = parser.toks[-1]
    notes = []

    def warn(msg):
        notes.append(msg)
        log.warning(msg)

    for key in stmts:
        if key not in ("baseMVA", "bus", "gen", "branch"):
            if key != "version":
                warn(f"ignoring unsupported field mpc.{key}")
    if "baseMVA" not in stmts:
        raise MissingSection("missing mpc.baseMVA", eof.line, eof.col)
    base_mva, tok = stmts["baseMVA"]
    if not isinstance(base_mva, float) or not base_mva > 0 or not math.isfinite(base_mva):
        raise CaseSyntaxError("mpc.baseMVA must be a positive scalar", tok.line, tok.col)
    bus = _matrix(stmts, "bus", eof, MIN_COLS["bus"])
    gen = _matrix(stmts, "gen", eof, MIN_COLS["gen"])
    branch = _matrix(stmts, "branch", eof, MIN_COLS["branch"])
    for mat, nm in ((bus, "bus"), (gen, "gen"), (branch, "branch")):
        _check_finite(mat, nm)

    # buses
    ids, types, slack_rows = [], [], []
    seen = {}
    for row, pos in zip(bus.rows, bus.row_pos):
        bid = _int_field(row[BUS_I], "bus id", pos)
        if bid in seen:
            raise DuplicateBusId(f"bus id {bid} defined twice", *pos)
        code = _int_field(row[BUS_TYPE], "bus type", pos)
        if code not in TYPE_KIND:
            if code == 4:
                raise CaseSyntaxError(f"isolated bus {bid} (type 4) is not supported", *pos)
            raise CaseSyntaxError(f"unknown bus type {code} for bus {bid}", *pos)
        if code == 3:
            slack_rows.append(pos)
            if len(slack_rows) > 1:
                raise MultipleSlackBuses(f"second slack bus {bid}", *pos)
        seen[bid] = len(ids)
        ids.append(bid)
        types.append(code)
    if not slack_rows:
        raise NoSlackBus("no bus of type 3", bus.line, bus.col)

    file_slack = types.index(3)
    order = [file_slack] + [i for i in range(len(ids)) if i != file_slack]
    dense = {ids[i]: k for k, i in enumerate(order)}
    n = len(ids)
    rows = [bus.rows[i] for i in order]
    pd = np.array([r[PD] for r in rows]) / base_mva
    qd = np.array([r[QD] for r in rows]) / base_mva
    gs = np.array([r[GS] for r in rows]) / base_mva
    bs = np.array([r[BS] for r in rows]) / base_mva
    kinds = [TYPE_KIND[types[i]] for i in order]

    # generators
    pg = np.zeros(n)
    qg = np.zeros(n)
    vg = np.ones(n)
    has_gen = np.zeros(n, dtype=bool)
    for row, pos in zip(gen.rows, gen.row_pos):
        bid = _int_field(row[GEN_BUS], "gen bus", pos)
        if bid not in dense:
            raise CaseSyntaxError(f"gen row references unknown bus {bid}", *pos)
        if not _status(row, GEN_STATUS, pos):
            continue
        i = dense[bid]
        if kinds[i] is BusKind.LOAD:
            warn(f"in-service gen at PQ bus {bid} treated as a negative load")
            pd[i] -= row[PG] / base_mva
            qd[i] -= row[QG] / base_mva
            continue
        pg[i] += row[PG] / base_mva
        qg[i] += row[QG] / base_mva
        if has_gen[i] and vg[i] != row[VG]:
            warn(f"conflicting voltage set-points at bus {bid}; keeping the first")
        elif not has_gen[i]:
            vg[i] = row[VG]
        has_gen[i] = True
    for i, kind in enumerate(kinds):
        if kind is BusKind.GENERATOR and not has_gen[i]:
            warn(f"PV bus {ids[order[i]]} has no in-service generator; demoted to PQ")
            kinds[i] = BusKind.LOAD
    if vg[0] != 1.0:
        notes.append(f"slack set-point {vg[0]} replaced by 1.0")
    vg[0] = 1.0
    vg[[i for i, k in enumerate(kinds) if k is BusKind.LOAD]] = 1.0

    # branches
    lines, r_list, x_list = [], [], []
    for row, pos in zip(branch.rows, branch.row_pos):
        f = _int_field(row[F_BUS], "from bus", pos)
        t = _int_field(row[T_BUS], "to bus", pos)
        for b in (f, t):
            if b not in dense:
                raise DanglingBranch(f"branch {f}-{t} references unknown bus {b}", *pos)
        if f == t:
            raise CaseSyntaxError(f"branch {f}-{t} is a self-loop", *pos)
        if not _status(row, BR_STATUS, pos):
            continue
        r, x = row[BR_R], row[BR_X]
        if r == 0 and x == 0:
            raise CaseSyntaxError(f"branch {f}-{t} has zero impedance", *pos)
        if x <= 0 or r < 0:
            raise CaseSyntaxError(
                f"branch {f}-{t} has r={r}, x={x}; need r >= 0 and x > 0", *pos
            )
        if r == 0:
            r = min_r_ratio * abs(x)
            notes.append(f"branch {f}-{t}: zero resistance floored to {r:g}")
        if len(row) > SHIFT and ((row[TAP] not in (0.0, 1.0)) or row[SHIFT] != 0):
            notes.append(f"branch {f}-{t}: tap/shift ignored")
        bc = row[BR_B]
        bs[dense[f]] += bc / 2.0
        bs[dense[t]] += bc / 2.0
        lines.append((dense[f], dense[t]))
        r_list.append(r)
        x_list.append(x)
    try:
        topo = GridTopology(
            kinds=kinds, lines=lines, base_mva=base_mva,
            labels=[ids[i] for i in order], name=name,
        )
    except TopologyError as exc:
        raise CaseSyntaxError(str(exc), branch.line, branch.col) from None
    g, b = admittances_from_rx(RxParams(np.array(r_list), np.array(x_list)))
    gamma, beta = log_params_from_admittances(g, b)
    params = AdmittanceParams(gamma, beta, gs, bs)
    base = OperatingPoint(pd=pd, qd=qd, pg=pg, qg=qg, vg=vg)
    return Case(name=name, topology=topo, base=base, params=params, warnings=notes)


BUNDLED_CASES = {
    "case2": "case2.m",
    "2bus": "case2.m",
    "case5": "case5.m",
    "5bus": "case5.m",
    "case14": "case14.m",
    "ieee14": "case14.m",
    "case118": "case118.m",
    "ieee118": "case118.m",
}


def bundled_case_path(name):
    here = os.path.join(os.path.dirname(__file__), "cases")
    return os.path.join(here, BUNDLED_CASES[name])


def load_case(name_or_path, **kw):
    """Load a bundled case by name (``ieee14``, ``case118``, ``2bus`` ...) or a file path."""
    if name_or_path in BUNDLED_CASES:
        path = bundled_case_path(name_or_path)
        name = os.path.splitext(BUNDLED_CASES[name_or_path])[0]
    else:
        path = name_or_path
        name = os.path.splitext(os.path.basename(path))[0]
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read(), name=name, **kw)


# --------------------------------------------------------------------------- datasets


@dataclass
class DatasetFile:
    """Observable generator/load measurements plus optional hidden load states.

    Block arrays are ``(n_bus_in_block, n_samples)``. ``split`` holds
    ``"train"``, ``"valid"`` or ``""`` per sample.
    """

    header: dict
    sample_ids: np.ndarray
    split: list
    gen_buses: np.ndarray
    load_buses: np.ndarray
    gen_v: np.ndarray
    gen_theta: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    hidden_v: np.ndarray = None
    hidden_theta: np.ndarray = None

    @property
    def n_samples(self):
        return len(self.sample_ids)

    @property
    def has_ground_truth(self):
        return self.hidden_v is not None and self.hidden_theta is not None

    def indices(self, tag):
        return np.array([i for i, s in enumerate(self.split) if s == tag], dtype=np.intp)

    def subset(self, cols):
        cols = np.asarray(cols, dtype=np.intp)
        hv = None if self.hidden_v is None else self.hidden_v[:, cols]
        ht = None if self.hidden_theta is None else self.hidden_theta[:, cols]
        return DatasetFile(
            header=dict(self.header, n_samples=int(len(cols))),
            sample_ids=self.sample_ids[cols],
            split=[self.split[i] for i in cols],
            gen_buses=self.gen_buses,
            load_buses=self.load_buses,
            gen_v=self.gen_v[:, cols], gen_theta=self.gen_theta[:, cols],
            gen_p=self.gen_p[:, cols], gen_q=self.gen_q[:, cols],
            load_p=self.load_p[:, cols], load_q=self.load_q[:, cols],
            hidden_v=hv, hidden_theta=ht,
        )

    def check_topology(self, topology):
        if not (np.array_equal(self.gen_buses, topology.gen_idx)
                and np.array_equal(self.load_buses, topology.load_idx)):
            raise ShapeMismatch("dataset bus blocks do not match the case topology")

    def inputs(self, topology, cols=None):
        from .powerflow import PfInputBatch

        self.check_topology(topology)
        sel = slice(None) if cols is None else np.asarray(cols, dtype=np.intp)
        n = self.gen_p[:, sel].shape[1]
        p = np.zeros((topology.n_bus, n))
        p[self.gen_buses] = self.gen_p[:, sel]
        p[self.load_buses] = self.load_p[:, sel]
        return PfInputBatch(v_g=self.gen_v[:, sel], p=p[1:], q_l=self.load_q[:, sel])

    def targets(self, cols=None):
        from .gradients import GenTargets

        sel = slice(None) if cols is None else np.asarray(cols, dtype=np.intp)
        return GenTargets(
            v=self.gen_v[:, sel], theta=self.gen_theta[:, sel],
            p=self.gen_p[:, sel], q=self.gen_q[:, sel],
        )

    def columns(self):
        cols = ["sample", "split"]
        for b in self.gen_buses:
            cols += [f"g{b}_v", f"g{b}_theta", f"g{b}_p", f"g{b}_q"]
        for b in self.load_buses:
            cols += [f"l{b}_p", f"l{b}_q"]
        if self.has_ground_truth:
            for b in self.load_buses:
                cols += [f"h{b}_v", f"h{b}_theta"]
        return cols


def _dataset_matrix(ds):
    blocks = []
    for k in range(len(ds.gen_buses)):
        blocks += [ds.gen_v[k], ds.gen_theta[k], ds.gen_p[k], ds.gen_q[k]]
    for k in range(len(ds.load_buses)):
        blocks += [ds.load_p[k], ds.load_q[k]]
    if ds.has_ground_truth:
        for k in range(len(ds.load_buses)):
            blocks += [ds.hidden_v[k], ds.hidden_theta[k]]
    if not blocks:
        return np.zeros((ds.n_samples, 0))
    return np.stack(blocks, axis=1)


def write_dataset(path, ds: DatasetFile):
    header = {k: ds.header.get(k) for k in DATASET_HEADER_KEYS}
    header["n_samples"] = ds.n_samples
    for k, v in ds.header.items():
        if k not in header:
            header[k] = v
    values = _dataset_matrix(ds)
    buf = io.StringIO()
    buf.write(json.dumps(header) + "\n")
    buf.write(",".join(ds.columns()) + "\n")
    for i in range(ds.n_samples):
        fields_ = [str(int(ds.sample_ids[i])), ds.split[i] or ""]
        fields_ += [_fmt(x) for x in values[i]]
        buf.write(",".join(fields_) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


_COL = re.compile(r"^([glh])(\d+)_(v|theta|p|q)$")
_BLOCK_FIELDS = {"g": ("v", "theta", "p", "q"), "l": ("p", "q"), "h": ("v", "theta")}


def read_dataset(path, topology=None) -> DatasetFile:
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"first line is not a JSON header: {exc}") from None
        if not isinstance(header, dict) or any(k not in header for k in DATASET_HEADER_KEYS):
            raise SchemaMismatch(f"header must contain keys {list(DATASET_HEADER_KEYS)}")
        reader = csv.reader(fh)
        try:
            cols = next(reader)
        except StopIteration:
            raise SchemaMismatch("missing CSV column header") from None
        rows = list(reader)
    if cols[:2] != ["sample", "split"]:
        raise SchemaMismatch("CSV must start with 'sample,split'")
    buses = {"g": [], "l": [], "h": []}
    layout = []
    for name in cols[2:]:
        m = _COL.match(name)
        if m is None or m.group(3) not in _BLOCK_FIELDS[m.group(1)]:
            raise SchemaMismatch(f"unknown column {name!r}")
        block, bus, fld = m.group(1), int(m.group(2)), m.group(3)
        if not buses[block] or buses[block][-1] != bus:
            buses[block].append(bus)
        layout.append((block, bus, fld))
    expected = []
    for block in ("g", "l", "h"):
        for bus in buses[block]:
            expected += [(block, bus, f) for f in _BLOCK_FIELDS[block]]
    if layout != expected:
        raise SchemaMismatch("columns are not in the documented order")
    if buses["h"] and buses["h"] != buses["l"]:
        raise ShapeMismatch("hidden block must cover exactly the load buses")
    if len(rows) != header["n_samples"]:
        raise SchemaMismatch(
            f"header declares {header['n_samples']} samples, file has {len(rows)}"
        )
    width = len(cols)
    data = np.zeros((len(rows), width - 2))
    ids, split = [], []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ShapeMismatch(f"sample row {i} has {len(row)} fields, expected {width}")
        try:
            ids.append(int(row[0]))
            data[i] = [float(x) for x in row[2:]]
        except ValueError as exc:
            raise SchemaMismatch(f"sample row {i}: {exc}") from None
        if row[1] not in ("train", "valid", ""):
            raise SchemaMismatch(f"sample row {i}: bad split tag {row[1]!r}")
        split.append(row[1])
    col_of = {key: j for j, key in enumerate(layout)}

    def block(b, fld):
        bl = buses[b]
        return np.array([data[:, col_of[(b, bus, fld)]] for bus in bl]).reshape(len(bl), len(rows))

    ds = DatasetFile(
        header=header,
        sample_ids=np.array(ids, dtype=np.int64),
        split=split,
        gen_buses=np.array(buses["g"], dtype=np.intp),
        load_buses=np.array(buses["l"], dtype=np.intp),
        gen_v=block("g", "v"), gen_theta=block("g", "theta"),
        gen_p=block("g", "p"), gen_q=block("g", "q"),
        load_p=block("l", "p"), load_q=block("l", "q"),
        hidden_v=block("h", "v") if buses["h"] else None,
        hidden_theta=block("h", "theta") if buses["h"] else None,
    )
    if topology is not None:
        ds.check_topology(topology)
    return ds


# --------------------------------------------------------------------------- params


def params_document(params: AdmittanceParams, topology: GridTopology):
    return {
        "format": PARAMS_FORMAT,
        "version": 1,
        "case": topology.name,
        "n_bus": topology.n_bus,
        "lines": [list(l) for l in topology.lines],
        "gamma": [float(x) for x in params.gamma],
        "beta": [float(x) for x in params.beta],
        "shunt_g": [float(x) for x in params.shunt_g],
        "shunt_b": [float(x) for x in params.shunt_b],
        "trainable": sorted(params.trainable),
    }


def write_params(path, params: AdmittanceParams, topology: GridTopology):
    if params.n_line != topology.n_line or params.n_bus != topology.n_bus:
        raise TopologyMismatch("parameters do not match the topology")
    text = json.dumps(params_document(params, topology), indent=1) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_params(path, topology: GridTopology = None) -> AdmittanceParams:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"parameter file is not JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != PARAMS_FORMAT:
        raise SchemaMismatch("not a diffpf parameter document")
    missing = [k for k in PARAM_GROUPS + ("lines", "n_bus") if k not in doc]
    if missing:
        raise SchemaMismatch(f"parameter document lacks {missing}")
    lines = [tuple(l) for l in doc["lines"]]
    if topology is not None:
        if len(lines) != topology.n_line:
            raise TopologyMismatch(
                f"file has {len(lines)} lines, topology has {topology.n_line}"
            )
        if lines != list(topology.lines) or doc["n_bus"] != topology.n_bus:
            raise TopologyMismatch("line endpoints or bus count disagree with the topology")
    if len(doc["gamma"]) != len(lines) or len(doc["beta"]) != len(lines):
        raise SchemaMismatch("gamma/beta length differs from the line list")
    if len(doc["shunt_g"]) != doc["n_bus"] or len(doc["shunt_b"]) != doc["n_bus"]:
        raise SchemaMismatch("shunt length differs from n_bus")
    return AdmittanceParams(
        gamma=np.array(doc["gamma"], dtype=float),
        beta=np.array(doc["beta"], dtype=float),
        shunt_g=np.array(doc["shunt_g"], dtype=float),
        shunt_b=np.array(doc["shunt_b"], dtype=float),
        trainable=frozenset(doc.get("trainable", ("gamma", "beta"))),
    )


# --------------------------------------------------------------------------- metrics


def _opt(x):
    return "" if x is None else _fmt(x)


def append_metrics(path, record):
    """Append one metrics row, writing the CSV header first if the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write(",".join(METRICS_COLUMNS) + "\n")
        fh.write(
            ",".join(
                [
                    str(int(record.epoch)),
                    _fmt(record.loss),
                    _opt(record.are),
                    _opt(record.valid_err),
                    _opt(record.elapsed_s),
                ]
            )
            + "\n"
        )


def read_metrics(path):
    """Read a metrics CSV into a list of dicts with ``None`` for empty fields."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise SchemaMismatch(f"metrics columns must be {METRICS_COLUMNS}")
        out = []
        for row in reader:
            rec = {"epoch": int(row["epoch"])}
            for k in METRICS_COLUMNS[1:]:
                rec[k] = float(row[k]) if row[k] != "" else None
            out.append(rec)
        return out
