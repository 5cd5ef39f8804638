"""Synthetic datasets, splits, the accuracy metric and experiment drivers.

Families are defined by syscall motifs: a chain of family-specific calls
sharing an argument handle (argument-dependency clique) and feeding return
values forward (address-dependency chain), with a conditional branch so
the exploration strategies disagree.  Instances perturb the motif model
with noise calls and are extracted into SCDGs by a chosen strategy, so the
class signal lives in the dependency structure rather than the raw label
bag.
"""
from __future__ import annotations

import csv
import hashlib
import io
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .explorer import (
    Budget,
    CallTemplate,
    ProgramModel,
    StateNode,
    Strategy,
    explore,
)
from .fedproto import AggregationMode, ProtocolConfig, run_protocol
from .neuralnet import (
    ModelDims,
    ModelParams,
    adam_step,
    backward,
    family_one_hot,
    flatten,
    fresh_adam_state,
    init_params,
    predict,
    unflatten,
)
from .scdg import Scdg, build_scdg


class HarnessError(Exception):
    pass


class EmptyInput(HarnessError):
    pass


class InsufficientData(HarnessError):
    pass


SYSCALL_VOCAB = (
    "CloseHandle", "CopyFileA", "CreateFileA", "CreateProcessA", "DeleteFileA",
    "ExitProcess", "GetModuleFileNameA", "GetProcAddress", "HttpSendRequestA",
    "InternetConnectA", "InternetOpenA", "LoadLibraryA", "ReadFile",
    "RegOpenKeyA", "RegSetValueA", "Sleep", "VirtualAlloc", "WriteFile",
)

_ADDR = {name: 0x1000 + 0x10 * i for i, name in enumerate(SYSCALL_VOCAB)}

DEFAULT_BUDGET = Budget(max_states_explored=400, max_trace_length=40, max_traces=8)


def derive_seed(*parts) -> int:
    text = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "big")


def accuracy(y: Sequence[int], y_hat: Sequence[int]) -> float:
    """Fraction of exact label matches."""
    if len(y) != len(y_hat):
        raise EmptyInput(f"length mismatch: {len(y)} vs {len(y_hat)}")
    if not y:
        raise EmptyInput("no samples")
    return sum(1 for a, b in zip(y, y_hat) if a == b) / len(y)


@dataclass(frozen=True)
class SyntheticFamilySpec:
    family_id: int
    motif: tuple[str, ...]
    alt_call: str
    noise_rate: float
    instance_count: int


@dataclass(frozen=True)
class LabelledModel:
    model: ProgramModel
    label: int


@dataclass(frozen=True)
class LabelledGraph:
    graph: Scdg
    label: int


@dataclass
class DatasetSplit:
    scheme: str  # "homogeneous" or "inhomogeneous"
    train_parts: list[list[LabelledGraph]]
    test_sets: list[list[LabelledGraph]]  # one shared set, or one per client


def family_specs(n_families: int, per_family: int, seed: int,
                 noise_rate: float = 0.1) -> list[SyntheticFamilySpec]:
    if n_families < 2:
        raise InsufficientData("need at least two families")
    rng = random.Random(derive_seed(seed, "families"))
    specs = []
    for fam in range(1, n_families + 1):
        motif = tuple(rng.sample(SYSCALL_VOCAB, 6))
        alt = rng.choice([n for n in SYSCALL_VOCAB if n not in motif])
        specs.append(SyntheticFamilySpec(fam, motif, alt, noise_rate, per_family))
    return specs


def _motif_model(spec: SyntheticFamilySpec, rng: Optional[random.Random]) -> ProgramModel:
    """Chain m0..m5 with a branch after m2 (m3 vs alt), argument handle shared
    by all motif calls and return values feeding the next call; noise calls
    (isolated, fresh tokens) inserted with probability noise_rate per gap."""
    handle = ("lit", f"fam{spec.family_id}")
    states: dict[int, StateNode] = {}
    next_id = 0

    def add(tpl: Optional[CallTemplate]) -> int:
        nonlocal next_id
        sid = next_id
        next_id += 1
        states[sid] = StateNode(sid, tpl, ())
        return sid

    def motif_tpl(name: str, prev_sid: Optional[int]) -> CallTemplate:
        args = [handle]
        if prev_sid is not None:
            args.append(("from", prev_sid))
        return CallTemplate(name, _ADDR[name], ("fresh",), tuple(args))

    def noise_states(after: int) -> list[int]:
        out = []
        if rng is not None and rng.random() < spec.noise_rate:
            name = rng.choice(SYSCALL_VOCAB)
            out.append(add(CallTemplate(name, _ADDR[name], ("fresh",),
                                        (("fresh",), ("fresh",)))))
        return out

    chain: list[int] = []
    prev = None
    for name in spec.motif[:3]:
        sid = add(motif_tpl(name, prev))
        chain.append(sid)
        chain.extend(noise_states(sid))
        prev = sid
    branch_a = add(motif_tpl(spec.motif[3], prev))
    branch_b = add(motif_tpl(spec.alt_call, prev))
    tail_prev = prev
    tail: list[int] = []
    prev = branch_a  # "from" wiring of the tail uses the main branch call
    for name in spec.motif[4:]:
        sid = add(motif_tpl(name, prev))
        tail.append(sid)
        tail.extend(noise_states(sid))
        prev = sid

    def link(seq: list[int]) -> None:
        for a, b in zip(seq, seq[1:]):
            states[a] = StateNode(a, states[a].emits, (b,))

    link(chain)
    states[chain[-1]] = StateNode(chain[-1], states[chain[-1]].emits,
                                  (branch_a, branch_b))
    states[branch_a] = StateNode(branch_a, states[branch_a].emits, (tail[0],))
    states[branch_b] = StateNode(branch_b, states[branch_b].emits, (tail[0],))
    link(tail)
    return ProgramModel(states, chain[0])


def gen_family_models(n_families: int, per_family: int, seed: int,
                      noise_rate: float = 0.1) -> list[LabelledModel]:
    """Deterministic per-instance program models, family label attached."""
    out = []
    for spec in family_specs(n_families, per_family, seed, noise_rate):
        for k in range(per_family):
            rng = random.Random(derive_seed(seed, "inst", spec.family_id, k))
            out.append(LabelledModel(_motif_model(spec, rng), spec.family_id))
    return out


def extract_graphs(models: Sequence[LabelledModel], strategy: Strategy,
                   budget: Budget = DEFAULT_BUDGET) -> list[LabelledGraph]:
    return [LabelledGraph(build_scdg(explore(m.model, strategy, budget)), m.label)
            for m in models]


def gen_synthetic_dataset(n_families: int, per_family: int, seed: int,
                          noise_rate: float = 0.1,
                          strategy: Strategy = Strategy.CDFS,
                          budget: Budget = DEFAULT_BUDGET) -> list[LabelledGraph]:
    return extract_graphs(gen_family_models(n_families, per_family, seed, noise_rate),
                          strategy, budget)


def motif_edge_sets(n_families: int, per_family: int, seed: int) -> dict[int, set]:
    """Name-level edge sets of the noiseless family motif graphs: the
    nearest-motif oracle classifier."""
    out = {}
    for spec in family_specs(n_families, per_family, seed, 0.0):
        g = build_scdg(explore(_motif_model(spec, None), Strategy.BFS, DEFAULT_BUDGET))
        out[spec.family_id] = {(g.nodes[s][0], g.nodes[d][0]) for s, d, _ in g.edges}
    return out


def nearest_motif_label(g: Scdg, motifs: dict[int, set]) -> int:
    edges = {(g.nodes[s][0], g.nodes[d][0]) for s, d, _ in g.edges}
    best, best_score = min(motifs), -1.0
    for fam in sorted(motifs):
        motif = motifs[fam]
        score = len(edges & motif) / max(len(motif), 1)
        if score > best_score:
            best, best_score = fam, score
    return best


def split_dataset(data: Sequence[LabelledGraph], scheme: str, n_clients: int,
                  seed: int, test_fraction: float = 0.1) -> DatasetSplit:
    """Homogeneous split: stratified shared test holdout (test_fraction of
    the data), remainder divided into n_clients near-equal stratified parts."""
    if scheme != "homogeneous":
        raise ValueError("split_dataset handles the homogeneous scheme; "
                         "use split_inhomogeneous for per-client extraction")
    if len(data) < n_clients + 1:
        raise InsufficientData(f"{len(data)} instances for {n_clients} clients")
    rng = random.Random(derive_seed(seed, "split"))
    by_label: dict[int, list[LabelledGraph]] = {}
    for item in data:
        by_label.setdefault(item.label, []).append(item)
    labels = sorted(by_label)
    for lab in labels:
        rng.shuffle(by_label[lab])

    test_total = round(test_fraction * len(data))
    quota = {lab: int(test_fraction * len(by_label[lab])) for lab in labels}
    remainders = sorted(
        labels,
        key=lambda lab: (test_fraction * len(by_label[lab])) % 1.0,
        reverse=True,
    )
    for lab in remainders:
        if sum(quota.values()) >= test_total:
            break
        quota[lab] += 1

    test: list[LabelledGraph] = []
    parts: list[list[LabelledGraph]] = [[] for _ in range(n_clients)]
    pointer = 0
    for lab in labels:
        items = by_label[lab]
        test.extend(items[:quota[lab]])
        train = items[quota[lab]:]
        base, extra = divmod(len(train), n_clients)
        counts = [base + (1 if (c - pointer) % n_clients < extra else 0)
                  for c in range(n_clients)]
        pointer = (pointer + extra) % n_clients
        pos = 0
        for c, cnt in enumerate(counts):
            parts[c].extend(train[pos:pos + cnt])
            pos += cnt
    return DatasetSplit("homogeneous", parts, [test])


def split_inhomogeneous(models: Sequence[LabelledModel],
                        strategies: Sequence[Strategy],
                        budgets: Sequence[Budget], seed: int,
                        test_fraction: float = 0.25) -> DatasetSplit:
    """Each client re-extracts graphs from the same program models with its
    own strategy and budget, then keeps a private stratified 75/25 split."""
    n_clients = len(strategies)
    if len(budgets) != n_clients:
        raise ValueError("one budget per strategy required")
    train_parts, test_sets = [], []
    for c, (strategy, budget) in enumerate(zip(strategies, budgets)):
        graphs = extract_graphs(models, strategy, budget)
        sub = split_dataset(graphs, "homogeneous", 1, derive_seed(seed, "client", c),
                            test_fraction=test_fraction)
        train_parts.append(sub.train_parts[0])
        test_sets.append(sub.test_sets[0])
    return DatasetSplit("inhomogeneous", train_parts, test_sets)


@dataclass
class ExperimentConfig:
    families: int = 5
    per_family: int = 60
    scheme: str = "homogeneous"
    n_clients: int = 3
    rounds: int = 10
    epochs: int = 1  # local epochs per round
    seed: int = 0
    mode: AggregationMode = AggregationMode.FULL
    hidden: int = 32
    max_paths: int = 8
    max_path_len: int = 16
    noise_rate: float = 0.1
    alpha: float = 0.01
    he_enabled: bool = True
    security_param: int = 1024
    fraction_bits: int = 32
    strategies: tuple[Strategy, ...] = (Strategy.BFS, Strategy.CBFS, Strategy.CDFS)
    budgets: tuple[Budget, ...] = (
        Budget(400, 40, 8),
        Budget(200, 40, 4),
        Budget(120, 40, 1),
    )

    def dims(self) -> ModelDims:
        return ModelDims(len(SYSCALL_VOCAB), hidden=self.hidden,
                         families=self.families, max_paths=self.max_paths,
                         max_path_len=self.max_path_len)


@dataclass
class RoundReport:
    round: int
    client_accuracy: dict[int, float]
    baseline: Optional[float] = None


def _make_split(config: ExperimentConfig) -> DatasetSplit:
    if config.scheme == "homogeneous":
        data = gen_synthetic_dataset(config.families, config.per_family,
                                     config.seed, config.noise_rate)
        return split_dataset(data, "homogeneous", config.n_clients, config.seed)
    models = gen_family_models(config.families, config.per_family,
                               config.seed, config.noise_rate)
    return split_inhomogeneous(models, config.strategies[:config.n_clients],
                               config.budgets[:config.n_clients], config.seed)


def _train_epoch(model: ModelParams, data: Sequence[LabelledGraph], state,
                 order_rng: random.Random, families: int):
    order = list(range(len(data)))
    order_rng.shuffle(order)
    vec = flatten(model)
    for idx in order:
        item = data[idx]
        grad = backward(item.graph, family_one_hot(item.label, families), model)
        vec, state = adam_step(vec, grad, state)
        model = unflatten(vec, model.dims, model.vocab)
    return model, state


def evaluate(model: ModelParams, data: Sequence[LabelledGraph]) -> float:
    return accuracy([item.label for item in data],
                    [predict(item.graph, model) for item in data])


def run_centralized(config: ExperimentConfig,
                    split: Optional[DatasetSplit] = None) -> float:
    """Train one model on the union of all training parts; evaluate on the
    shared test set.  Epoch budget is rounds * epochs."""
    split = split or _make_split(config)
    train = [item for part in split.train_parts for item in part]
    test = split.test_sets[0]
    model = init_params(config.dims(), SYSCALL_VOCAB, seed=derive_seed(config.seed, "init"))
    state = fresh_adam_state(config.dims(), alpha=config.alpha)
    for epoch in range(config.rounds * config.epochs):
        rng = random.Random(derive_seed(config.seed, "central-order", epoch))
        model, state = _train_epoch(model, train, state, rng, config.families)
    return evaluate(model, test)


def run_federated(config: ExperimentConfig,
                  split: Optional[DatasetSplit] = None,
                  baseline: Optional[float] = None):
    """Drive the secure protocol; after each round every client evaluates on
    its test set.  Returns (reports, csv_text, round_records, transcript)."""
    split = split or _make_split(config)
    n = config.n_clients
    tests = split.test_sets if len(split.test_sets) == n else [split.test_sets[0]] * n
    dims = config.dims()
    models = [init_params(dims, SYSCALL_VOCAB, seed=derive_seed(config.seed, "init"))
              for _ in range(n)]
    adam = [fresh_adam_state(dims, alpha=config.alpha) for _ in range(n)]
    reports = [RoundReport(0, {c: evaluate(models[c], tests[c]) for c in range(n)},
                           baseline)]

    def local_train(client: int, model: ModelParams, round_idx: int) -> ModelParams:
        rng = random.Random(derive_seed(config.seed, "order", client, round_idx,
                                        adam[client].t))
        model, adam[client] = _train_epoch(model, split.train_parts[client],
                                           adam[client], rng, config.families)
        return model

    def on_round_end(round_idx: int, current: list[ModelParams]) -> None:
        reports.append(RoundReport(
            round_idx,
            {c: evaluate(current[c], tests[c]) for c in range(n)},
            baseline,
        ))

    proto = ProtocolConfig(
        n_clients=n, rounds=config.rounds, mode=config.mode,
        shared_seed=derive_seed(config.seed, "proto"),
        fraction_bits=config.fraction_bits,
        security_param=config.security_param,
        local_epochs=config.epochs, he_enabled=config.he_enabled,
    )
    records, transcript, _final = run_protocol(proto, models, local_train,
                                               on_round_end=on_round_end)
    return reports, reports_to_csv(reports, config), records, transcript


def reports_to_csv(reports: Sequence[RoundReport], config: ExperimentConfig) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["round", "client", "accuracy", "mode", "scheme"])
    mode = config.mode.value
    for rep in reports:
        for client in sorted(rep.client_accuracy):
            writer.writerow([rep.round, client + 1,
                             f"{rep.client_accuracy[client]:.6f}", mode, config.scheme])
        if rep.baseline is not None:
            writer.writerow([rep.round, "centralized", f"{rep.baseline:.6f}",
                             mode, config.scheme])
    return out.getvalue()


@dataclass
class ReportSummary:
    curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    baseline: Optional[float] = None

    def final(self, client: str) -> float:
        return self.curves[client][-1][1]

    def peak(self, client: str) -> float:
        return max(v for _, v in self.curves[client])


def report(csv_text: str) -> tuple[ReportSummary, str]:
    """Parse the run CSV into per-client curves plus a gnuplot-ready table."""
    summary = ReportSummary()
    reader = csv.reader(io.StringIO(csv_text))
    rows = list(reader)
    if rows and rows[0][:2] == ["round", "client"]:
        rows = rows[1:]
    for row in rows:
        if not row:
            continue
        round_idx, client, acc = int(row[0]), row[1], float(row[2])
        if client == "centralized":
            summary.baseline = acc
        else:
            summary.curves.setdefault(client, []).append((round_idx, acc))
    for curve in summary.curves.values():
        curve.sort()
    clients = sorted(summary.curves)
    lines = ["# round " + " ".join(f"client-{c}" for c in clients)
             + (" centralized" if summary.baseline is not None else "")]
    rounds = sorted({r for curve in summary.curves.values() for r, _ in curve})
    for r in rounds:
        cells = [str(r)]
        for c in clients:
            vals = dict(summary.curves[c])
            cells.append(f"{vals.get(r, float('nan')):.6f}")
        if summary.baseline is not None:
            cells.append(f"{summary.baseline:.6f}")
        lines.append(" ".join(cells))
    return summary, "\n".join(lines) + "\n"
