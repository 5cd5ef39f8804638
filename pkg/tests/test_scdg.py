import random

import pytest
from hypothesis import given, settings, strategies as st

from fedscdg.scdg import (
    NULL,
    CallEvent,
    DependencyKind,
    ExecutionTrace,
    OrderViolation,
    ParseError,
    Scdg,
    Token,
    TokenKind,
    build_scdg,
    deserialize_scdg,
    find_dependency,
    parse_token,
    parse_traces,
    serialize_scdg,
    serialize_traces,
)


def lit(v):
    return Token(TokenKind.ConcreteLiteral, str(v))


def sym(i):
    return Token(TokenKind.SymbolicVar, i)


def ev(name, args=(), ret=None, addr=0x1000, seq=0):
    return CallEvent(name, tuple(args), ret, addr, seq)


class TestFindDependency:
    def test_module_filename_copy_example(self):
        # GetModuleFilenameA(0, m) followed by CopyFileA(m, m', 1)
        m, m2 = sym(1), sym(2)
        a = ev("GetModuleFilenameA", [lit(0), m], seq=0)
        b = ev("CopyFileA", [m, m2, lit(1)], seq=1)
        assert find_dependency(a, b) == {DependencyKind.Argument}

    def test_return_feeding_argument(self):
        h = sym(7)
        a = ev("open", [lit("f")], ret=h, seq=0)
        b = ev("write", [h, sym(8)], seq=1)
        assert find_dependency(a, b) == {DependencyKind.Address}

    def test_no_shared_tokens(self):
        a = ev("foo", [lit(1)], seq=0)
        b = ev("bar", [lit(2)], seq=1)
        assert find_dependency(a, b) is None

    def test_null_tokens_never_link(self):
        a = ev("f", [NULL], seq=0)
        b = ev("g", [NULL], seq=1)
        assert find_dependency(a, b) is None

    def test_null_ret_never_links(self):
        a = ev("f", [], ret=NULL, seq=0)
        b = ev("g", [NULL], seq=1)
        assert find_dependency(a, b) is None

    def test_zero_literal_does_link(self):
        a = ev("f", [lit(0)], seq=0)
        b = ev("g", [lit(0)], seq=1)
        assert find_dependency(a, b) == {DependencyKind.Argument}

    def test_both_kinds(self):
        h = sym(1)
        a = ev("f", [h], ret=h, seq=0)
        b = ev("g", [h], seq=1)
        assert find_dependency(a, b) == {DependencyKind.Argument, DependencyKind.Address}

    def test_order_violation(self):
        a = ev("f", [], seq=1)
        b = ev("g", [], seq=1)
        with pytest.raises(OrderViolation):
            find_dependency(a, b)


def brute_force_scdg(traces):
    """O(n^2) oracle: pairwise dependency check, merge by (name, address)."""
    nodes = set()
    edges = {}
    for trace in traces:
        for e in trace.events:
            nodes.add((e.name, e.call_address))
        evs = trace.events
        for i in range(len(evs)):
            for j in range(i + 1, len(evs)):
                kinds = set()
                b_args = set(evs[j].args)
                for t in evs[i].args:
                    if t.kind is not TokenKind.Null and t in b_args:
                        kinds.add(DependencyKind.Argument)
                r = evs[i].ret
                if r is not None and r.kind is not TokenKind.Null and r in b_args:
                    kinds.add(DependencyKind.Address)
                if kinds:
                    key = ((evs[i].name, evs[i].call_address),
                           (evs[j].name, evs[j].call_address))
                    edges.setdefault(key, set()).update(kinds)
    order = sorted(nodes)
    ids = {k: i for i, k in enumerate(order)}
    out = sorted((ids[s], ids[d], frozenset(k)) for (s, d), k in edges.items())
    return Scdg(nodes=tuple(order), edges=tuple(out))


def random_trace(rng, n_events=10):
    pool = [lit(rng.randint(0, 3)), sym(rng.randint(0, 4)), NULL,
            Token(TokenKind.Address, rng.randint(0, 0xFF))]
    events = []
    rets = []
    for i in range(n_events):
        args = tuple(rng.choice(pool + rets) for _ in range(rng.randint(0, 3)))
        ret = rng.choice([None, sym(100 + i)])
        if ret is not None and rng.random() < 0.5:
            rets.append(ret)
        events.append(CallEvent(f"call{rng.randint(0, 4)}", args, ret,
                                0x400000 + rng.randint(0, 3) * 0x10, i))
    return ExecutionTrace(tuple(events))


class TestBuildScdg:
    def test_two_call_graph(self):
        m = sym(1)
        t = ExecutionTrace((
            ev("GetModuleFilenameA", [lit(0), m], seq=0),
            ev("CopyFileA", [m, sym(2), lit(1)], addr=0x2000, seq=1),
        ))
        g = build_scdg([t])
        assert g.node_count == 2
        assert g.edge_count == 1
        (src, dst, kinds) = g.edges[0]
        assert g.nodes[src][0] == "GetModuleFilenameA"
        assert g.nodes[dst][0] == "CopyFileA"
        assert kinds == frozenset({DependencyKind.Argument})

    def test_empty_trace_list(self):
        g = build_scdg([])
        assert g.node_count == 0 and g.edge_count == 0

    def test_duplicate_traces_merge(self):
        rng = random.Random(3)
        t = random_trace(rng)
        assert build_scdg([t, t]) == build_scdg([t])

    def test_matches_brute_force(self):
        rng = random.Random(17)
        for _ in range(50):
            traces = [random_trace(rng, rng.randint(0, 12)) for _ in range(rng.randint(1, 3))]
            assert build_scdg(traces) == brute_force_scdg(traces)

    def test_permutation_invariance(self):
        rng = random.Random(5)
        traces = [random_trace(rng, 8) for _ in range(4)]
        shuffled = traces[::-1]
        assert build_scdg(traces) == build_scdg(shuffled)

    def test_edges_respect_time(self):
        rng = random.Random(11)
        trace = random_trace(rng, 15)
        g = build_scdg([trace])
        # every edge must be witnessed by an ordered event pair
        for src, dst, kinds in g.edges:
            witnessed = False
            evs = trace.events
            for i in range(len(evs)):
                for j in range(i + 1, len(evs)):
                    if ((evs[i].name, evs[i].call_address) == g.nodes[src]
                            and (evs[j].name, evs[j].call_address) == g.nodes[dst]):
                        if find_dependency(evs[i], evs[j]):
                            witnessed = True
            assert witnessed


class TestSerialization:
    def test_empty_graph_format(self):
        assert serialize_scdg(build_scdg([])) == "scdg v1\nnodes 0\nedges 0\n"

    def test_two_node_graph_format(self):
        m = sym(1)
        t = ExecutionTrace((
            ev("GetModuleFilenameA", [lit(0), m], addr=0x10, seq=0),
            ev("CopyFileA", [m], addr=0x20, seq=1),
        ))
        text = serialize_scdg(build_scdg([t]))
        lines = text.splitlines()
        assert lines[0] == "scdg v1"
        assert lines[1] == "nodes 2"
        assert lines[2] == "node 0 CopyFileA 20"
        assert lines[3] == "node 1 GetModuleFilenameA 10"
        assert lines[4] == "edges 1"
        assert lines[5] == "edge 1 0 A"

    def test_round_trip_random(self):
        rng = random.Random(23)
        for _ in range(25):
            traces = [random_trace(rng, 10) for _ in range(2)]
            g = build_scdg(traces)
            assert deserialize_scdg(serialize_scdg(g)) == g

    def test_parse_error_has_line_number(self):
        with pytest.raises(ParseError) as exc:
            deserialize_scdg("scdg v1\nnodes 1\nnot-a-node\n")
        assert "line 3" in str(exc.value)

    def test_bad_header(self):
        with pytest.raises(ParseError):
            deserialize_scdg("bogus\n")


class TestTraceFormat:
    def test_round_trip(self):
        rng = random.Random(29)
        traces = [random_trace(rng, 6) for _ in range(3)]
        parsed = parse_traces(serialize_traces(traces))
        assert parsed == traces

    def test_token_spellings(self):
        assert parse_token("c:abc") == Token(TokenKind.ConcreteLiteral, "abc")
        assert parse_token("s:4") == Token(TokenKind.SymbolicVar, 4)
        assert parse_token("a:ff") == Token(TokenKind.Address, 255)
        assert parse_token("n") == NULL

    def test_malformed_record(self):
        with pytest.raises(ParseError) as exc:
            parse_traces("call 0 foo 10 ret=n\n")
        assert exc.value.line == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(2, 12))
def test_property_oracle_equivalence(seed, n_events):
    rng = random.Random(seed)
    traces = [random_trace(rng, n_events)]
    assert build_scdg(traces) == brute_force_scdg(traces)
