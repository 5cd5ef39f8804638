import random

import pytest

from fedscdg.explorer import (
    Budget,
    CallTemplate,
    EmptyModel,
    ProgramModel,
    StateNode,
    Strategy,
    explore,
    parse_model,
    serialize_model,
)
from fedscdg.scdg import DependencyKind, build_scdg

BIG = Budget(max_states_explored=10_000, max_trace_length=100, max_traces=1000)


def emit(name, addr=0x100, ret=None, args=()):
    return CallTemplate(name, addr, ret, tuple(args))


def model_from(spec, entry=0):
    """spec: {sid: (template-or-None, successors)}"""
    states = {sid: StateNode(sid, tpl, tuple(succ)) for sid, (tpl, succ) in spec.items()}
    return ProgramModel(states, entry)


def names(trace):
    return [e.name for e in trace.events]


class TestExplore:
    def test_diamond_bfs(self):
        m = model_from({
            0: (None, (1, 2)),
            1: (emit("a"), (3,)),
            2: (emit("b"), (3,)),
            3: (None, ()),
        })
        traces = explore(m, Strategy.BFS, BIG)
        assert [names(t) for t in traces] == [["a"], ["b"]]

    def test_chain_all_strategies(self):
        m = model_from({
            0: (emit("a"), (1,)),
            1: (emit("b"), (2,)),
            2: (emit("c"), ()),
        })
        for strat in Strategy:
            traces = explore(m, strat, BIG)
            assert [names(t) for t in traces] == [["a", "b", "c"]]

    def test_self_loop_truncation(self):
        m = model_from({0: (emit("spin"), (0,))})
        traces = explore(m, Strategy.BFS, Budget(100, 5, 10))
        assert len(traces) == 1
        assert names(traces[0]) == ["spin"] * 5

    def test_empty_model(self):
        with pytest.raises(EmptyModel):
            explore(ProgramModel({}, 0), Strategy.BFS, BIG)

    def test_determinism(self):
        m = random_dag(random.Random(4))
        a = explore(m, Strategy.CDFS, BIG)
        b = explore(m, Strategy.CDFS, BIG)
        assert a == b

    def test_address_edge_wiring(self):
        # state 1's ret feeds state 2's argument -> Address edge in the SCDG
        m = model_from({
            0: (emit("open", addr=0x10, ret=("fresh",)), (1,)),
            1: (emit("write", addr=0x20, args=(("from", 0),)), ()),
        })
        g = build_scdg(explore(m, Strategy.BFS, BIG))
        assert any(DependencyKind.Address in kinds for _, _, kinds in g.edges)


def enumerate_paths(model):
    """Exhaustive root-to-terminal path enumeration oracle (acyclic models)."""
    out = []

    def walk(path):
        succ = model.states[path[-1]].successors
        if not succ:
            out.append(path)
            return
        for s in succ:
            walk(path + (s,))

    walk((model.entry,))
    return out


def random_dag(rng, max_states=8):
    n = rng.randint(1, max_states)
    spec = {}
    for sid in range(n):
        later = list(range(sid + 1, n))
        k = rng.choice([0, 1, 2]) if later else 0
        succ = tuple(sorted(rng.sample(later, min(k, len(later)))))
        tpl = emit(f"c{rng.randint(0, 4)}", addr=0x100 + sid) if rng.random() < 0.8 else None
        spec[sid] = (tpl, succ)
    return model_from(spec)


def trace_names(model, path):
    return tuple(model.states[s].emits.name for s in path if model.states[s].emits)


class TestOracleProperties:
    def test_bfs_equals_enumeration(self):
        rng = random.Random(99)
        for _ in range(60):
            m = random_dag(rng)
            got = [tuple(names(t)) for t in explore(m, Strategy.BFS, BIG)]
            expect = sorted((trace_names(m, p) for p in enumerate_paths(m)),
                            key=len)  # BFS discovers short paths first
            assert sorted(got) == sorted(trace_names(m, p) for p in enumerate_paths(m))
            assert [len(g) for g in got] == sorted(len(e) for e in expect)

    def test_cbfs_subset_of_bfs(self):
        rng = random.Random(7)
        for _ in range(40):
            m = random_dag(rng)
            bfs = {tuple(names(t)) for t in explore(m, Strategy.BFS, BIG)}
            cbfs = {tuple(names(t)) for t in explore(m, Strategy.CBFS, BIG)}
            assert cbfs <= bfs

    def test_cbfs_one_shortest_path_per_terminal(self):
        rng = random.Random(13)
        for _ in range(40):
            m = random_dag(rng)
            terminals = {p[-1] for p in enumerate_paths(m)}
            shortest = {}
            for p in enumerate_paths(m):
                if p[-1] not in shortest or len(p) < len(shortest[p[-1]]):
                    shortest[p[-1]] = p
            got = explore(m, Strategy.CBFS, BIG)
            assert len(got) == len(terminals)
            for t in got:
                assert len(t.events) in {len(trace_names(m, p)) for p in enumerate_paths(m)
                                         if len(p) == min(len(q) for q in enumerate_paths(m)
                                                          if q[-1] == p[-1])}

    def test_cdfs_first_trace_is_longest(self):
        rng = random.Random(21)
        for _ in range(60):
            m = random_dag(rng)
            got = explore(m, Strategy.CDFS, BIG)
            longest = max(len(trace_names(m, p)) for p in enumerate_paths(m))
            assert len(got[0].events) == longest
            lengths = [len(t.events) for t in got]
            assert lengths == sorted(lengths, reverse=True)

    def test_budget_monotonicity(self):
        rng = random.Random(31)
        for _ in range(25):
            m = random_dag(rng)
            small = Budget(max_states_explored=6, max_trace_length=100, max_traces=3)
            for grow in [
                Budget(12, 100, 3),
                Budget(6, 100, 6),
                Budget(12, 100, 6),
            ]:
                for strat in Strategy:
                    before = {tuple(names(t)) for t in explore(m, strat, small)}
                    after = {tuple(names(t)) for t in explore(m, strat, grow)}
                    assert before <= after


class TestModelFormat:
    def test_round_trip(self):
        m = model_from({
            0: (emit("open", addr=0x10, ret=("fresh",), args=(("lit", "x"),)), (1, 2)),
            1: (emit("write", addr=0x20, args=(("from", 0),)), ()),
            2: (None, ()),
        })
        parsed = parse_model(serialize_model(m))
        assert parsed == m

    def test_entry_is_first_state(self):
        m = parse_model("state 5 emit a 10 ret=n args=\nstate 1\nsucc 5 1\n")
        assert m.entry == 5

    def test_bad_budget(self):
        with pytest.raises(ValueError):
            Budget(0, 1, 1)
