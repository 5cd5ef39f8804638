"""System-call dependency graphs (SCDGs) built from execution traces.

A trace is an ordered list of system-call events carrying argument and
return tokens.  Two calls in the same trace are linked when they share an
argument token (Argument dependency) or when the earlier call's return
value is used as an argument of the later one (Address dependency).  The
graph merges events across traces by (call name, call address).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional


class ScdgError(Exception):
    pass


class OrderViolation(ScdgError):
    """Dependency queried against the temporal order of the trace."""


class ParseError(ScdgError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TokenKind(enum.Enum):
    ConcreteLiteral = "c"
    SymbolicVar = "s"
    Address = "a"
    Null = "n"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    value: object = None

    def spell(self) -> str:
        if self.kind is TokenKind.Null:
            return "n"
        if self.kind is TokenKind.Address:
            return "a:%x" % self.value
        return f"{self.kind.value}:{self.value}"


NULL = Token(TokenKind.Null)


def parse_token(text: str) -> Token:
    if text == "n":
        return NULL
    if ":" not in text:
        raise ValueError(f"malformed token {text!r}")
    tag, _, val = text.partition(":")
    if tag == "c":
        return Token(TokenKind.ConcreteLiteral, val)
    if tag == "s":
        return Token(TokenKind.SymbolicVar, int(val))
    if tag == "a":
        return Token(TokenKind.Address, int(val, 16))
    raise ValueError(f"unknown token kind {tag!r}")


@dataclass(frozen=True)
class CallEvent:
    name: str
    args: tuple[Token, ...]
    ret: Optional[Token]
    call_address: int
    seq_index: int


@dataclass(frozen=True)
class ExecutionTrace:
    events: tuple[CallEvent, ...]

    def __post_init__(self):
        last = -1
        for ev in self.events:
            if ev.seq_index <= last:
                raise ValueError("seq_index must be strictly increasing")
            last = ev.seq_index

    def __len__(self):
        return len(self.events)


class DependencyKind(enum.Enum):
    Argument = "A"
    Address = "D"


_KIND_TAGS = {
    frozenset({DependencyKind.Argument}): "A",
    frozenset({DependencyKind.Address}): "D",
    frozenset({DependencyKind.Argument, DependencyKind.Address}): "AD",
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


@dataclass(frozen=True)
class Scdg:
    """Canonical directed graph: node i is (name, call_address), ids assigned
    by lexicographic (name, call_address) order; edges sorted by (src, dst)."""

    nodes: tuple[tuple[str, int], ...]
    edges: tuple[tuple[int, int, frozenset], ...]

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)


def find_dependency(a: CallEvent, b: CallEvent) -> Optional[set]:
    """Dependency kinds linking earlier call a to later call b, or None.

    Null tokens never witness a dependency; any other shared token does,
    including concrete literals such as 0.
    """
    if a.seq_index >= b.seq_index:
        raise OrderViolation(f"{a.seq_index} >= {b.seq_index}")
    kinds = set()
    b_args = set(b.args)
    if any(t.kind is not TokenKind.Null and t in b_args for t in a.args):
        kinds.add(DependencyKind.Argument)
    if a.ret is not None and a.ret.kind is not TokenKind.Null and a.ret in b_args:
        kinds.add(DependencyKind.Address)
    return kinds or None


def build_scdg(traces: Iterable[ExecutionTrace]) -> Scdg:
    """Merge all traces into one canonical SCDG.

    Nodes are call sites keyed by (name, call_address); an edge carries the
    union of dependency kinds witnessed by any intra-trace event pair.
    """
    keys: set[tuple[str, int]] = set()
    raw_edges: dict[tuple[tuple[str, int], tuple[str, int]], set] = {}
    for trace in traces:
        events = trace.events
        for ev in events:
            keys.add((ev.name, ev.call_address))
        for i, a in enumerate(events):
            for b in events[i + 1:]:
                kinds = find_dependency(a, b)
                if kinds:
                    k = ((a.name, a.call_address), (b.name, b.call_address))
                    raw_edges.setdefault(k, set()).update(kinds)
    order = sorted(keys)
    ids = {key: i for i, key in enumerate(order)}
    edges = sorted(
        (ids[src], ids[dst], frozenset(kinds))
        for (src, dst), kinds in raw_edges.items()
    )
    return Scdg(nodes=tuple(order), edges=tuple(edges))


def canonicalize(nodes, edges) -> Scdg:
    """Renumber arbitrary (name, addr) nodes / edge triples canonically."""
    order = sorted(set(nodes))
    # duplicate (name, addr) pairs collapse onto one id
    ids = {key: i for i, key in enumerate(order)}
    merged: dict[tuple[int, int], set] = {}
    for src, dst, kinds in edges:
        k = (ids[nodes[src]], ids[nodes[dst]])
        merged.setdefault(k, set()).update(kinds)
    out = sorted((s, d, frozenset(ks)) for (s, d), ks in merged.items())
    return Scdg(nodes=tuple(order), edges=tuple(out))


def serialize_scdg(g: Scdg) -> str:
    lines = ["scdg v1", f"nodes {g.node_count}"]
    for i, (name, addr) in enumerate(g.nodes):
        lines.append("node %d %s %x" % (i, name, addr))
    lines.append(f"edges {g.edge_count}")
    for src, dst, kinds in g.edges:
        lines.append("edge %d %d %s" % (src, dst, _KIND_TAGS[kinds]))
    return "\n".join(lines) + "\n"


def deserialize_scdg(text: str) -> Scdg:
    lines = text.splitlines()
    pos = 0

    def take(expect: str) -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of input", pos + 1)
        parts = lines[pos].split()
        if not parts or parts[0] != expect:
            raise ParseError(f"expected {expect!r}", pos + 1)
        pos += 1
        return parts

    header = take("scdg")
    if header[1:] != ["v1"]:
        raise ParseError("unsupported version", 1)
    try:
        n_nodes = int(take("nodes")[1])
    except (IndexError, ValueError):
        raise ParseError("malformed nodes count", pos)
    nodes = []
    for _ in range(n_nodes):
        parts = take("node")
        try:
            nid, name, addr = int(parts[1]), parts[2], int(parts[3], 16)
        except (IndexError, ValueError):
            raise ParseError("malformed node line", pos)
        if nid != len(nodes):
            raise ParseError(f"node id {nid} out of order", pos)
        nodes.append((name, addr))
    try:
        n_edges = int(take("edges")[1])
    except (IndexError, ValueError):
        raise ParseError("malformed edges count", pos)
    edges = []
    for _ in range(n_edges):
        parts = take("edge")
        try:
            src, dst, tag = int(parts[1]), int(parts[2]), parts[3]
        except (IndexError, ValueError):
            raise ParseError("malformed edge line", pos)
        if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
            raise ParseError("edge endpoint out of range", pos)
        if tag not in _TAG_KINDS:
            raise ParseError(f"unknown kind tag {tag!r}", pos)
        edges.append((src, dst, _TAG_KINDS[tag]))
    return Scdg(nodes=tuple(nodes), edges=tuple(edges))


def serialize_traces(traces: Iterable[ExecutionTrace]) -> str:
    """Trace file: one 'call' record per line, traces separated by blank lines."""
    blocks = []
    for trace in traces:
        lines = []
        for ev in trace.events:
            ret = ev.ret.spell() if ev.ret is not None else "n"
            args = ",".join(t.spell() for t in ev.args)
            lines.append(
                "call %d %s %x ret=%s args=%s" % (ev.seq_index, ev.name, ev.call_address, ret, args)
            )
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def parse_traces(text: str) -> list[ExecutionTrace]:
    traces: list[ExecutionTrace] = []
    current: list[CallEvent] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            if current:
                traces.append(ExecutionTrace(tuple(current)))
                current = []
            continue
        parts = line.split()
        if parts[0] != "call" or len(parts) != 6:
            raise ParseError("expected 'call <seq> <name> <addr> ret=<tok> args=<toks>'", lineno)
        try:
            seq = int(parts[1])
            addr = int(parts[3], 16)
            if not parts[4].startswith("ret=") or not parts[5].startswith("args="):
                raise ValueError
            ret = parse_token(parts[4][4:])
            argtext = parts[5][5:]
            args = tuple(parse_token(t) for t in argtext.split(",")) if argtext else ()
        except ValueError as exc:
            raise ParseError(str(exc) or "malformed call record", lineno)
        current.append(CallEvent(parts[2], args, None if ret.kind is TokenKind.Null else ret, addr, seq))
    if current:
        traces.append(ExecutionTrace(tuple(current)))
    return traces
