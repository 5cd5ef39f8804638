"""LSTM graph autoencoder with per-family classifiers.

The encoder embeds node labels along directed paths of an SCDG, runs them
through an LSTM and mean-pools the final hidden states into one feature
vector.  A teacher-forced LSTM decoder reconstructs the per-step label
distributions (squared-error reconstruction loss), and one linear layer
per malware family feeds a softmax classifier (cross-entropy-style loss
averaged over families).  Gradients are exact reverse-mode derivatives
computed by hand; training uses Adam.  All math is float64.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .scdg import Scdg

PROB_CLAMP = 1e-12


class NeuralNetError(Exception):
    pass


class DimensionMismatch(NeuralNetError):
    pass


class ShapeMismatch(NeuralNetError):
    pass


class LengthMismatch(NeuralNetError):
    pass


class UnknownLabel(NeuralNetError):
    pass


@dataclass
class LstmParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_C: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_C: np.ndarray

    @property
    def hidden(self) -> int:
        return self.b_f.shape[0]

    def arrays(self):
        return [self.W_f, self.W_i, self.W_o, self.W_C,
                self.b_f, self.b_i, self.b_o, self.b_C]


@dataclass
class EncoderParams:
    embed: np.ndarray  # (vocab, d)
    lstm: LstmParams


@dataclass
class DecoderParams:
    lstm: LstmParams
    project: np.ndarray  # (vocab, d)


@dataclass
class ClassifierParams:
    W: np.ndarray  # (families, d)
    b: np.ndarray  # (families,)


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    hidden: int = 64
    families: int = 2
    max_paths: int = 16
    max_path_len: int = 32


@dataclass
class ModelParams:
    dims: ModelDims
    vocab: tuple[str, ...]
    encoder: EncoderParams
    decoder: DecoderParams
    classifier: ClassifierParams

    def arrays(self):
        return ([self.encoder.embed] + self.encoder.lstm.arrays()
                + self.decoder.lstm.arrays() + [self.decoder.project]
                + [self.classifier.W, self.classifier.b])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class PathBatch:
    """Token index sequences along selected graph paths; -1 marks padding."""
    tokens: np.ndarray   # (paths, width) int64
    lengths: np.ndarray  # (paths,) int64

    @property
    def mask(self) -> np.ndarray:
        width = self.tokens.shape[1]
        return (np.arange(width)[None, :] < self.lengths[:, None]).astype(np.float64)


def _lstm_shape(d: int, e: int, rng) -> LstmParams:
    def w():
        return rng.uniform(-0.08, 0.08, size=(d, d + e))

    def b():
        return rng.uniform(-0.08, 0.08, size=d)

    return LstmParams(w(), w(), w(), w(), b(), b(), b(), b())


def init_params(dims: ModelDims, vocab: Sequence[str], seed: int = 0) -> ModelParams:
    """Seeded uniform [-0.08, 0.08] initialization."""
    if len(vocab) != dims.vocab_size:
        raise DimensionMismatch("vocab list does not match dims.vocab_size")
    rng = np.random.default_rng(seed)
    d, v, n = dims.hidden, dims.vocab_size, dims.families
    encoder = EncoderParams(
        embed=rng.uniform(-0.08, 0.08, size=(v, d)),
        lstm=_lstm_shape(d, d, rng),
    )
    decoder = DecoderParams(
        lstm=_lstm_shape(d, d, rng),
        project=rng.uniform(-0.08, 0.08, size=(v, d)),
    )
    classifier = ClassifierParams(
        W=rng.uniform(-0.08, 0.08, size=(n, d)),
        b=rng.uniform(-0.08, 0.08, size=n),
    )
    return ModelParams(dims, tuple(vocab), encoder, decoder, classifier)


def flatten(p: ModelParams) -> np.ndarray:
    """Canonical coordinate vector: encoder, decoder, classifier, each in
    declared field order, row-major."""
    return np.concatenate([a.ravel() for a in p.arrays()])


def encoder_param_count(dims: ModelDims) -> int:
    d, v = dims.hidden, dims.vocab_size
    return v * d + 4 * (d * (d + d) + d)


def param_count(dims: ModelDims) -> int:
    d, v, n = dims.hidden, dims.vocab_size, dims.families
    lstm = 4 * (d * (d + d) + d)
    return v * d + lstm + lstm + v * d + n * d + n


def unflatten(vec: np.ndarray, dims: ModelDims, vocab: Sequence[str]) -> ModelParams:
    if vec.shape != (param_count(dims),):
        raise LengthMismatch(f"expected {param_count(dims)} coordinates, got {vec.shape}")
    d, v, n = dims.hidden, dims.vocab_size, dims.families
    pos = 0

    def take(*shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = vec[pos:pos + size].reshape(shape).copy()
        pos += size
        return out

    def lstm():
        ws = [take(d, 2 * d) for _ in range(4)]
        bs = [take(d) for _ in range(4)]
        return LstmParams(*ws, *bs)

    embed = take(v, d)
    enc_lstm = lstm()
    dec_lstm = lstm()
    project = take(v, d)
    cw = take(n, d)
    cb = take(n)
    return ModelParams(
        dims, tuple(vocab),
        EncoderParams(embed, enc_lstm),
        DecoderParams(dec_lstm, project),
        ClassifierParams(cw, cb),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def lstm_step(x_t: np.ndarray, h_prev: np.ndarray, C_prev: np.ndarray,
              p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM cell update for a single timestep."""
    d = p.hidden
    if h_prev.shape != (d,) or C_prev.shape != (d,):
        raise DimensionMismatch("hidden/cell state size mismatch")
    if x_t.shape[0] + d != p.W_f.shape[1]:
        raise DimensionMismatch("input size mismatch against gate matrices")
    z = np.concatenate([h_prev, x_t])
    f = _sigmoid(p.W_f @ z + p.b_f)
    i = _sigmoid(p.W_i @ z + p.b_i)
    o = _sigmoid(p.W_o @ z + p.b_o)
    c_bar = np.tanh(p.W_C @ z + p.b_C)
    C_t = f * C_prev + i * c_bar
    h_t = o * np.tanh(C_t)
    return h_t, C_t


def graph_to_paths(g: Scdg, K: int, L_max: int, vocab_index: dict[str, int]) -> PathBatch:
    """Deterministically select up to K maximal directed paths, depth-first
    from in-degree-0 nodes (all nodes if none), successors in node-id order,
    no node revisited within one path.  Paths are truncated at L_max."""
    adj: dict[int, list[int]] = {}
    indeg = [0] * g.node_count
    for src, dst, _kinds in g.edges:
        adj.setdefault(src, []).append(dst)
        indeg[dst] += 1
    for succs in adj.values():
        succs.sort()
    starts = [i for i in range(g.node_count) if indeg[i] == 0] or list(range(g.node_count))

    def extend(path: tuple[int, ...], visited: frozenset):
        nxt = [d for d in adj.get(path[-1], ()) if d not in visited]
        if not nxt:
            yield path
            return
        for d in nxt:
            yield from extend(path + (d,), visited | {d})

    def all_paths():
        for s in starts:
            yield from extend((s,), frozenset({s}))

    paths = [p[:L_max] for p in itertools.islice(all_paths(), K)]
    if not paths:
        return PathBatch(tokens=np.full((1, 1), -1, dtype=np.int64),
                         lengths=np.zeros(1, dtype=np.int64))
    width = max(len(p) for p in paths)
    tokens = np.full((len(paths), width), -1, dtype=np.int64)
    for r, path in enumerate(paths):
        for c, node in enumerate(path):
            name = g.nodes[node][0]
            if name not in vocab_index:
                raise UnknownLabel(f"node label {name!r} outside model vocabulary")
            tokens[r, c] = vocab_index[name]
    lengths = np.array([len(p) for p in paths], dtype=np.int64)
    return PathBatch(tokens=tokens, lengths=lengths)


def _lstm_forward(X: np.ndarray, mask: np.ndarray, p: LstmParams):
    """Batched LSTM over (paths, steps, input); padding steps freeze h and C."""
    P, L, _e = X.shape
    d = p.hidden
    h = np.zeros((P, d))
    C = np.zeros((P, d))
    H = np.empty((P, L, d))
    cache = []
    for t in range(L):
        z = np.concatenate([h, X[:, t, :]], axis=1)
        f = _sigmoid(z @ p.W_f.T + p.b_f)
        i = _sigmoid(z @ p.W_i.T + p.b_i)
        o = _sigmoid(z @ p.W_o.T + p.b_o)
        c_bar = np.tanh(z @ p.W_C.T + p.b_C)
        C_new = f * C + i * c_bar
        tC = np.tanh(C_new)
        h_new = o * tC
        m = mask[:, t:t + 1]
        cache.append((z, f, i, o, c_bar, C, tC, m))
        h = m * h_new + (1.0 - m) * h
        C = m * C_new + (1.0 - m) * C
        H[:, t, :] = h
    return H, cache


def _zero_lstm_grads(p: LstmParams) -> LstmParams:
    return LstmParams(*[np.zeros_like(a) for a in p.arrays()])


def _lstm_backward(dH: np.ndarray, cache, p: LstmParams, input_size: int):
    """Reverse-mode through _lstm_forward; dH holds the upstream gradient on
    h after each step.  Returns (dX, parameter grads)."""
    P, L, d = dH.shape
    g = _zero_lstm_grads(p)
    dX = np.zeros((P, L, input_size))
    dh_carry = np.zeros((P, d))
    dC_carry = np.zeros((P, d))
    for t in reversed(range(L)):
        z, f, i, o, c_bar, C_prev, tC, m = cache[t]
        dh = dh_carry + dH[:, t, :]
        dh_new = m * dh
        dh_skip = (1.0 - m) * dh
        dC_new = m * dC_carry
        dC_skip = (1.0 - m) * dC_carry
        do = dh_new * tC
        dC_new = dC_new + dh_new * o * (1.0 - tC ** 2)
        df = dC_new * C_prev
        di = dC_new * c_bar
        dc_bar = dC_new * i
        dC_carry = dC_new * f + dC_skip
        dzf = df * f * (1.0 - f)
        dzi = di * i * (1.0 - i)
        dzo = do * o * (1.0 - o)
        dzc = dc_bar * (1.0 - c_bar ** 2)
        g.W_f += dzf.T @ z
        g.W_i += dzi.T @ z
        g.W_o += dzo.T @ z
        g.W_C += dzc.T @ z
        g.b_f += dzf.sum(axis=0)
        g.b_i += dzi.sum(axis=0)
        g.b_o += dzo.sum(axis=0)
        g.b_C += dzc.sum(axis=0)
        dz = dzf @ p.W_f + dzi @ p.W_i + dzo @ p.W_o + dzc @ p.W_C
        dh_carry = dz[:, :d] + dh_skip
        dX[:, t, :] = dz[:, d:]
    return dX, g


def _embed_inputs(tokens: np.ndarray, embed: np.ndarray) -> np.ndarray:
    safe = np.clip(tokens, 0, None)
    X = embed[safe]
    X[tokens < 0] = 0.0
    return X


def encode_batch(batch: PathBatch, p: EncoderParams):
    X = _embed_inputs(batch.tokens, p.embed)
    mask = batch.mask
    H, cache = _lstm_forward(X, mask, p.lstm)
    finals = H[:, -1, :]
    x = finals.mean(axis=0)
    return x, (X, mask, H, cache)


def encode(g: Scdg, p: EncoderParams, dims: ModelDims, vocab_index: dict[str, int]) -> np.ndarray:
    batch = graph_to_paths(g, dims.max_paths, dims.max_path_len, vocab_index)
    x, _ = encode_batch(batch, p)
    return x


def _decoder_inputs(x: np.ndarray, batch: PathBatch, embed: np.ndarray) -> np.ndarray:
    P, L = batch.tokens.shape
    X = np.zeros((P, L, x.shape[0]))
    X[:, 0, :] = x
    if L > 1:
        X[:, 1:, :] = _embed_inputs(batch.tokens[:, :-1], embed)
    return X


def decode(x: np.ndarray, target: PathBatch, p: DecoderParams, embed: np.ndarray) -> np.ndarray:
    """Teacher-forced reconstruction: per-step label probability vectors."""
    if x.shape[0] != p.lstm.hidden:
        raise DimensionMismatch("feature vector size does not match decoder")
    X = _decoder_inputs(x, target, embed)
    H, _ = _lstm_forward(X, target.mask, p.lstm)
    return _softmax(H @ p.project.T)


def one_hot_targets(batch: PathBatch, vocab_size: int) -> np.ndarray:
    P, L = batch.tokens.shape
    c = np.zeros((P, L, vocab_size))
    rows, cols = np.nonzero(batch.tokens >= 0)
    c[rows, cols, batch.tokens[rows, cols]] = 1.0
    return c


def loss1(c: np.ndarray, c_hat: np.ndarray, mask: np.ndarray) -> float:
    """Half the summed squared reconstruction error over non-padding steps."""
    if c.shape != c_hat.shape:
        raise ShapeMismatch(f"{c.shape} vs {c_hat.shape}")
    diff = (c - c_hat) * mask[:, :, None]
    return 0.5 * float((diff ** 2).sum())


def classify(x: np.ndarray, p: ClassifierParams) -> tuple[np.ndarray, int]:
    """Softmax over per-family linear scores; labels are 1-based, ties break
    to the lowest family index."""
    if x.shape[0] != p.W.shape[1]:
        raise DimensionMismatch("feature vector size does not match classifier")
    logits = p.W @ x + p.b
    y_hat = _softmax(logits)
    return y_hat, int(np.argmax(y_hat)) + 1


def loss2(y_hat: np.ndarray, y: np.ndarray) -> float:
    if y_hat.shape != y.shape:
        raise ShapeMismatch(f"{y_hat.shape} vs {y.shape}")
    n = y.shape[0]
    p = np.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n)


def _forward(g: Scdg, y: np.ndarray, p: ModelParams):
    vocab_index = {name: i for i, name in enumerate(p.vocab)}
    batch = graph_to_paths(g, p.dims.max_paths, p.dims.max_path_len, vocab_index)
    x, enc_cache = encode_batch(batch, p.encoder)
    X_dec = _decoder_inputs(x, batch, p.encoder.embed)
    mask = batch.mask
    H_dec, dec_cache = _lstm_forward(X_dec, mask, p.decoder.lstm)
    probs = _softmax(H_dec @ p.decoder.project.T)
    targets = one_hot_targets(batch, p.dims.vocab_size)
    l1 = loss1(targets, probs, mask)
    logits_c = p.classifier.W @ x + p.classifier.b
    s = _softmax(logits_c)
    l2 = loss2(s, y)
    cache = (batch, x, enc_cache, X_dec, mask, H_dec, dec_cache, probs, targets, s)
    return l1, l2, cache


def total_loss(g: Scdg, y: np.ndarray, p: ModelParams) -> float:
    l1, l2, _ = _forward(g, y, p)
    return l1 + l2


def predict(g: Scdg, p: ModelParams) -> int:
    vocab_index = {name: i for i, name in enumerate(p.vocab)}
    x = encode(g, p.encoder, p.dims, vocab_index)
    _, label = classify(x, p.classifier)
    return label


def backward(g: Scdg, y: np.ndarray, p: ModelParams) -> np.ndarray:
    """Exact gradient of total_loss with respect to flatten(p)."""
    _l1, _l2, cache = _forward(g, y, p)
    batch, x, enc_cache, X_dec, mask, H_dec, dec_cache, probs, targets, s = cache
    P = batch.tokens.shape[0]
    n = y.shape[0]
    d = p.dims.hidden

    # classifier: loss2 through clamp and softmax
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    inside = (s > lo) & (s < hi)
    p_clamped = np.clip(s, lo, hi)
    ds = np.where(inside, -(y / p_clamped - (1.0 - y) / (1.0 - p_clamped)) / n, 0.0)
    dlogits_c = s * (ds - (s * ds).sum())
    dW_c = np.outer(dlogits_c, x)
    db_c = dlogits_c
    dx = p.classifier.W.T @ dlogits_c

    # decoder: loss1 through softmax at non-padding steps
    dprobs = (probs - targets) * mask[:, :, None]
    dlogits_d = probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))
    V = p.dims.vocab_size
    dproject = dlogits_d.reshape(-1, V).T @ H_dec.reshape(-1, d)
    dH_dec = dlogits_d @ p.decoder.project
    dX_dec, g_dec = _lstm_backward(dH_dec, dec_cache, p.decoder.lstm, d)
    dx += dX_dec[:, 0, :].sum(axis=0)

    dembed = np.zeros_like(p.encoder.embed)
    if batch.tokens.shape[1] > 1:
        prev_tok = batch.tokens[:, :-1]
        grads = dX_dec[:, 1:, :]
        valid = prev_tok >= 0
        np.add.at(dembed, prev_tok[valid], grads[valid])

    # encoder: mean pooling spreads dx evenly over per-path final states
    X_enc, enc_mask, _H_enc, enc_lcache = enc_cache
    dH_enc = np.zeros((P, X_enc.shape[1], d))
    dH_enc[:, -1, :] = dx / P
    dX_enc, g_enc = _lstm_backward(dH_enc, enc_lcache, p.encoder.lstm, d)
    valid = batch.tokens >= 0
    np.add.at(dembed, batch.tokens[valid], dX_enc[valid])

    grads = ([dembed] + g_enc.arrays() + g_dec.arrays() + [dproject, dW_c, db_c])
    return np.concatenate([a.ravel() for a in grads])


def adam_step(params: np.ndarray, grads: np.ndarray, s: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update."""
    if params.shape != grads.shape or params.shape != s.m.shape:
        raise LengthMismatch("params, grads and moments must share one length")
    t = s.t + 1
    m = s.beta1 * s.m + (1.0 - s.beta1) * grads
    v = s.beta2 * s.v + (1.0 - s.beta2) * grads ** 2
    m_hat = m / (1.0 - s.beta1 ** t)
    v_hat = v / (1.0 - s.beta2 ** t)
    updated = params - s.alpha * m_hat / (np.sqrt(v_hat) + s.eps)
    return updated, AdamState(m=m, v=v, t=t, alpha=s.alpha, beta1=s.beta1,
                              beta2=s.beta2, eps=s.eps)


def fresh_adam_state(dims: ModelDims, alpha: float = 1e-3) -> AdamState:
    size = param_count(dims)
    return AdamState(m=np.zeros(size), v=np.zeros(size), alpha=alpha)


def family_one_hot(label: int, families: int) -> np.ndarray:
    y = np.zeros(families)
    y[label - 1] = 1.0
    return y


_CKPT_MAGIC = b"mdl v1\n"


def save_checkpoint(p: ModelParams) -> bytes:
    head = struct.pack("<5I", p.dims.vocab_size, p.dims.hidden, p.dims.families,
                       p.dims.max_paths, p.dims.max_path_len)
    return _CKPT_MAGIC + head + flatten(p).astype("<f8").tobytes()


def load_checkpoint(data: bytes, vocab: Sequence[str]) -> ModelParams:
    if not data.startswith(_CKPT_MAGIC):
        raise NeuralNetError("bad checkpoint magic")
    off = len(_CKPT_MAGIC)
    v, d, n, K, L = struct.unpack_from("<5I", data, off)
    dims = ModelDims(v, d, n, K, L)
    vec = np.frombuffer(data, dtype="<f8", offset=off + 20).astype(np.float64)
    return unflatten(vec, dims, vocab)
