"""Path exploration over abstract program models.

Stands in for symbolic execution of a binary: a program model is a finite
state machine where states may emit a system-call template and branch into
up to two successors.  Exploration walks root-to-terminal paths under a
count budget and materializes each path as an execution trace, with fresh
symbolic variables drawn from a per-exploration counter.
"""
from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .scdg import CallEvent, ExecutionTrace, Token, TokenKind, NULL, ParseError


class ExplorerError(Exception):
    pass


class EmptyModel(ExplorerError):
    """Program model has no entry state."""


# argument / return slots of an emit template:
#   ("fresh",)          -> new symbolic variable
#   ("lit", value)      -> concrete literal
#   ("from", state_id)  -> ret token of the latest event emitted by state_id
#                          earlier on the same path (fresh if none)
Slot = tuple


@dataclass(frozen=True)
class CallTemplate:
    name: str
    call_address: int
    ret_slot: Optional[Slot]
    arg_slots: tuple[Slot, ...]


@dataclass(frozen=True)
class StateNode:
    id: int
    emits: Optional[CallTemplate] = None
    successors: tuple[int, ...] = ()


@dataclass(frozen=True)
class ProgramModel:
    states: dict[int, StateNode]
    entry: int


@dataclass(frozen=True)
class Budget:
    max_states_explored: int
    max_trace_length: int
    max_traces: int

    def __post_init__(self):
        if min(self.max_states_explored, self.max_trace_length, self.max_traces) < 1:
            raise ValueError("budget fields must be strictly positive")


class Strategy(enum.Enum):
    BFS = "bfs"
    CBFS = "cbfs"
    CDFS = "cdfs"


def _materialize(path: tuple[int, ...], model: ProgramModel, counter,
                 max_len: int) -> ExecutionTrace:
    """Instantiate the call templates along a state path."""
    events: list[CallEvent] = []
    last_ret: dict[int, Token] = {}

    def resolve(slot: Slot) -> Token:
        if slot[0] == "fresh":
            return Token(TokenKind.SymbolicVar, next(counter))
        if slot[0] == "lit":
            return Token(TokenKind.ConcreteLiteral, slot[1])
        if slot[0] == "from":
            tok = last_ret.get(slot[1])
            return tok if tok is not None else Token(TokenKind.SymbolicVar, next(counter))
        raise ValueError(f"unknown slot {slot!r}")

    for sid in path:
        tpl = model.states[sid].emits
        if tpl is None:
            continue
        args = tuple(resolve(s) for s in tpl.arg_slots)
        ret = resolve(tpl.ret_slot) if tpl.ret_slot is not None else None
        if ret is not None:
            last_ret[sid] = ret
        events.append(CallEvent(tpl.name, args, ret, tpl.call_address, len(events)))
        if len(events) >= max_len:
            break
    return ExecutionTrace(tuple(events))


def _emit_count(path: tuple[int, ...], model: ProgramModel) -> int:
    return sum(1 for sid in path if model.states[sid].emits is not None)


def explore(model: ProgramModel, strategy: Strategy, budget: Budget) -> list[ExecutionTrace]:
    """Explore root-to-terminal paths and return their traces.

    BFS returns complete paths in breadth-first discovery order; CDFS
    explores depth-first and orders results by decreasing trace length;
    CBFS returns one shortest path per terminal (first-visit breadth-first
    tree), ties broken by successor order.  A path also terminates when its
    emitted-event count reaches max_trace_length.
    """
    if model.entry not in model.states:
        raise EmptyModel(f"entry state {model.entry} missing")
    counter = itertools.count()
    if strategy is Strategy.CBFS:
        return _explore_cbfs(model, budget, counter)

    paths: list[tuple[int, ...]] = []
    frontier = deque([(model.entry,)])
    explored = 0
    while frontier and len(paths) < budget.max_traces and explored < budget.max_states_explored:
        path = frontier.popleft() if strategy is Strategy.BFS else frontier.pop()
        explored += 1
        succ = model.states[path[-1]].successors
        if not succ or _emit_count(path, model) >= budget.max_trace_length:
            paths.append(path)
            continue
        children = succ if strategy is Strategy.BFS else tuple(reversed(succ))
        for nxt in children:
            frontier.append(path + (nxt,))
    if strategy is Strategy.CDFS:
        paths.sort(key=lambda p: -_emit_count(p, model))
    return [_materialize(p, model, counter, budget.max_trace_length) for p in paths]


def _explore_cbfs(model: ProgramModel, budget: Budget, counter) -> list[ExecutionTrace]:
    parent: dict[int, Optional[int]] = {model.entry: None}
    terminals: list[int] = []
    frontier = deque([model.entry])
    explored = 0
    while frontier and len(terminals) < budget.max_traces and explored < budget.max_states_explored:
        sid = frontier.popleft()
        explored += 1
        succ = model.states[sid].successors
        if not succ:
            terminals.append(sid)
            continue
        for nxt in succ:
            if nxt not in parent:
                parent[nxt] = sid
                frontier.append(nxt)
    traces = []
    for term in terminals:
        path = []
        cur: Optional[int] = term
        while cur is not None:
            path.append(cur)
            cur = parent[cur]
        path.reverse()
        traces.append(_materialize(tuple(path), model, counter, budget.max_trace_length))
    return traces


def _parse_slot(text: str) -> Slot:
    if text == "fresh":
        return ("fresh",)
    if text.startswith("lit:"):
        return ("lit", text[4:])
    if text.startswith("from:") and text.endswith(".ret"):
        return ("from", int(text[5:-4]))
    raise ValueError(f"malformed slot {text!r}")


def parse_model(text: str) -> ProgramModel:
    """Model file: 'state <id> [emit <name> <addr-hex> ret=<slot> args=<slots>]'
    and 'succ <id> <id...>' lines.  The first state declared is the entry."""
    states: dict[int, StateNode] = {}
    succs: dict[int, tuple[int, ...]] = {}
    entry: Optional[int] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "state":
                sid = int(parts[1])
                emits = None
                if len(parts) > 2:
                    if parts[2] != "emit" or len(parts) < 6:
                        raise ValueError("expected 'emit <name> <addr> ret=<slot> args=<slots>'")
                    name, addr = parts[3], int(parts[4], 16)
                    if not parts[5].startswith("ret=") or not parts[6].startswith("args="):
                        raise ValueError("expected ret= and args= fields")
                    rtext = parts[5][4:]
                    ret = None if rtext == "n" else _parse_slot(rtext)
                    atext = parts[6][5:]
                    args = tuple(_parse_slot(s) for s in atext.split(",")) if atext else ()
                    emits = CallTemplate(name, addr, ret, args)
                states[sid] = StateNode(sid, emits)
                if entry is None:
                    entry = sid
            elif parts[0] == "succ":
                succs[int(parts[1])] = tuple(int(p) for p in parts[2:])
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc) or "malformed model line", lineno)
    if entry is None:
        raise EmptyModel("model declares no states")
    for sid, targets in succs.items():
        if sid not in states:
            raise EmptyModel(f"succ for undeclared state {sid}")
        for t in targets:
            if t not in states:
                raise EmptyModel(f"successor {t} undeclared")
        states[sid] = StateNode(sid, states[sid].emits, targets)
    return ProgramModel(states, entry)


def serialize_model(model: ProgramModel) -> str:
    def spell_slot(slot: Slot) -> str:
        if slot[0] == "fresh":
            return "fresh"
        if slot[0] == "lit":
            return f"lit:{slot[1]}"
        return f"from:{slot[1]}.ret"

    lines = []
    ordered = [model.entry] + sorted(s for s in model.states if s != model.entry)
    for sid in ordered:
        st = model.states[sid]
        if st.emits is None:
            lines.append(f"state {sid}")
        else:
            tpl = st.emits
            ret = "n" if tpl.ret_slot is None else spell_slot(tpl.ret_slot)
            args = ",".join(spell_slot(s) for s in tpl.arg_slots)
            lines.append("state %d emit %s %x ret=%s args=%s" % (sid, tpl.name, tpl.call_address, ret, args))
    for sid in ordered:
        st = model.states[sid]
        if st.successors:
            lines.append("succ %d %s" % (sid, " ".join(str(t) for t in st.successors)))
    return "\n".join(lines) + "\n"
