"""Hierarchical transformer encoder with a masked-sentence decoder and a
pointer-network de-shuffling decoder.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names; the
prefix (``encoder.``, ``msp.``, ``ptr.``) decides the optimiser group.
All blocks are post-norm: attention -> add & norm -> FFN -> add & norm.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD_ID, EncodedDocument

Params = dict[str, Tensor]

FFN_MULTIPLIER = 4


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    token_layers: int = 2
    local_token_layers: int = 1
    sentence_layers: int = 2
    decoder_layers: int = 2
    max_tokens: int = 512
    max_sentences: int = 64
    dropout: float = 0.0
    use_sentence_pos_embedding: bool = True
    reset_token_positions_per_sentence: bool = False
    share_embeddings: bool = True
    init_scale: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.local_token_layers <= self.token_layers:
            raise ValueError("local_token_layers must lie in [0, token_layers]")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must exceed the 5 reserved ids")

    @property
    def ffn_hidden(self) -> int:
        return FFN_MULTIPLIER * self.d_model

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SentenceReps:
    H: Tensor
    V: Tensor

    def __len__(self):
        return self.H.shape[0]


# parameters

def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple]:
    s = {}
    for w in ("wq", "wk", "wv", "wo"):
        s[f"{prefix}.attn.{w}"] = (d, d)
    for b in ("bq", "bk", "bv", "bo"):
        s[f"{prefix}.attn.{b}"] = (d,)
    s[f"{prefix}.ffn.w1"] = (d, hidden)
    s[f"{prefix}.ffn.b1"] = (hidden,)
    s[f"{prefix}.ffn.w2"] = (hidden, d)
    s[f"{prefix}.ffn.b2"] = (d,)
    for ln in ("ln1", "ln2"):
        s[f"{prefix}.{ln}.g"] = (d,)
        s[f"{prefix}.{ln}.b"] = (d,)
    return s


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, V, h = config.d_model, config.vocab_size, config.ffn_hidden
    s: dict[str, tuple] = {
        "encoder.tok_emb": (V, d),
        "encoder.tok_pos": (config.max_tokens, d),
    }
    if config.use_sentence_pos_embedding:
        s["encoder.sent_pos"] = (config.max_sentences, d)
    for l in range(config.token_layers):
        s.update(_block_shapes(f"encoder.token.{l}", d, h))
    for l in range(config.sentence_layers):
        s.update(_block_shapes(f"encoder.sentence.{l}", d, h))
    if not config.share_embeddings:
        s["msp.tok_emb"] = (V, d)
    s["msp.pos"] = (config.max_tokens, d)
    for l in range(config.decoder_layers):
        s.update(_block_shapes(f"msp.block.{l}", d, h))
    s["msp.w_out"] = (d, V)
    s["ptr.step_pos"] = (config.max_sentences, d)
    # row 0 encodes the start marker (P_0 = 0); rows 1.. are slots 1..max_sentences
    s["ptr.orig_pos"] = (config.max_sentences + 1, d)
    for l in range(config.decoder_layers):
        s.update(_block_shapes(f"ptr.block.{l}", d, h))
    s["ptr.u_a"] = (d, d)
    s["ptr.w_a"] = (d, d)
    s["ptr.v_a"] = (d, 1)
    return s


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Uniform(-init_scale, init_scale) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(config).items()):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            data = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.uniform(-config.init_scale, config.init_scale, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def param_group(name: str) -> str:
    return "encoder" if name.startswith("encoder.") else "decoder"


# building blocks

def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def multi_head_attention(x: Tensor, params: Params, prefix: str, n_heads: int,
                         mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Self-attention over (B, T, d). ``mask`` broadcasts to (B, heads, T, T).
    Returns the output and the attention probabilities (B, heads, T, T)."""
    B, T, d = x.shape
    dh = d // n_heads
    p = lambda k: params[f"{prefix}.attn.{k}"]

    def heads(t):
        return t.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(x, p("wq"), p("bq")))
    k = heads(_linear(x, p("wk"), p("bk")))
    v = heads(_linear(x, p("wv"), p("bv")))
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.matmul(probs, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return _linear(ctx, p("wo"), p("bo")), probs


def transformer_block(x: Tensor, params: Params, prefix: str, config: ModelConfig,
                      mask: np.ndarray, cond: Tensor | None = None,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Post-norm block. ``cond`` (B, d) is added to every position after the
    attention add & norm, before the FFN."""
    p = lambda k: params[f"{prefix}.{k}"]
    a, probs = multi_head_attention(x, params, prefix, config.n_heads, mask)
    x = ad.layer_norm(x + ad.dropout(a, config.dropout, rng), p("ln1.g"), p("ln1.b"), config.ln_eps)
    if cond is not None:
        x = x + cond.reshape(cond.shape[0], 1, cond.shape[1])
    f = _linear(ad.gelu(_linear(x, p("ffn.w1"), p("ffn.b1"))), p("ffn.w2"), p("ffn.b2"))
    x = ad.layer_norm(x + ad.dropout(f, config.dropout, rng), p("ln2.g"), p("ln2.b"), config.ln_eps)
    return x, probs


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))[None, None]


# encoder

@dataclass
class DocBatch:
    ids: np.ndarray           # (B, T) token ids, PAD beyond each doc
    tok_pos: np.ndarray       # (B, T) position ids
    key_mask: np.ndarray      # (B, T) real-token mask
    tok_sent: np.ndarray      # (B, T) sentence index of each token, -1 on padding
    bos: np.ndarray           # (B, S) flat index of each sentence's BOS
    sent_mask: np.ndarray     # (B, S) real-sentence mask
    n_sentences: list[int]


def check_limits(doc: EncodedDocument, config: ModelConfig) -> None:
    if len(doc) < 1:
        raise ValueError("document has no sentences")
    if doc.n_tokens > config.max_tokens or len(doc) > config.max_sentences:
        raise ValueError(
            f"document {doc.doc_id!r} ({doc.n_tokens} tokens, {len(doc)} sentences) exceeds "
            f"model limits ({config.max_tokens} tokens, {config.max_sentences} sentences)")
    if doc.n_tokens and doc.flat.max() >= config.vocab_size:
        raise ValueError(f"document {doc.doc_id!r} has token ids outside the vocabulary")


def collate(docs: Sequence[EncodedDocument], config: ModelConfig) -> DocBatch:
    for doc in docs:
        check_limits(doc, config)
    B = len(docs)
    T = max(d.n_tokens for d in docs)
    S = max(len(d) for d in docs)
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    key_mask = np.zeros((B, T), dtype=bool)
    tok_sent = np.full((B, T), -1, dtype=np.int64)
    bos = np.zeros((B, S), dtype=np.int64)
    sent_mask = np.zeros((B, S), dtype=bool)
    for b, d in enumerate(docs):
        n = d.n_tokens
        ids[b, :n] = d.flat
        pos[b, :n] = d.sentence_positions if config.reset_token_positions_per_sentence else d.positions
        key_mask[b, :n] = True
        tok_sent[b, :n] = np.repeat(np.arange(len(d)), [len(s) for s in d.sentences])
        bos[b, :len(d)] = d.boundary_index
        sent_mask[b, :len(d)] = True
    return DocBatch(ids, pos, key_mask, tok_sent, bos, sent_mask, [len(d) for d in docs])


def encode_batch(batch: DocBatch, params: Params, config: ModelConfig,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Run both encoder levels. Returns H (B, S, d), V (B, S, d) and the
    sentence attention matrix (B, S, S) averaged over heads, then layers.

    The first ``local_token_layers`` token layers attend within each sentence
    only; the remaining token layers attend over the whole flat document.
    """
    x = ad.embedding(params["encoder.tok_emb"], batch.ids) + ad.embedding(params["encoder.tok_pos"], batch.tok_pos)
    x = ad.dropout(x, config.dropout, rng)
    mask = batch.key_mask[:, None, None, :]
    # padding carries sentence id -1, so pads see only pads and real tokens never see pads
    local = (batch.tok_sent[:, :, None] == batch.tok_sent[:, None, :])[:, None]
    for l in range(config.token_layers):
        m = local if l < config.local_token_layers else mask
        x, _ = transformer_block(x, params, f"encoder.token.{l}", config, m, rng=rng)
    B, S = batch.bos.shape
    V = ad.take(x, (np.arange(B)[:, None], batch.bos))
    h = V
    if config.use_sentence_pos_embedding:
        h = h + ad.take(params["encoder.sent_pos"], slice(0, S))
    smask = batch.sent_mask[:, None, None, :]
    layers = []
    for l in range(config.sentence_layers):
        h, probs = transformer_block(h, params, f"encoder.sentence.{l}", config, smask, rng=rng)
        layers.append(probs.data.mean(axis=1))
    A = np.mean(layers, axis=0) if layers else np.broadcast_to(np.eye(S), (B, S, S)).copy()
    return h, V, A


def encode_document(doc: EncodedDocument, params: Params, config: ModelConfig
                    ) -> tuple[SentenceReps, np.ndarray]:
    """Sentence representations and the (|D|, |D|) attention matrix of one document."""
    H, V, A = encode_batch(collate([doc], config), params, config)
    n = len(doc)
    return SentenceReps(H[0], V[0]), A[0, :n, :n]


# masked-sentence decoder

def _msp_embedding(params: Params, config: ModelConfig) -> Tensor:
    return params["encoder.tok_emb"] if config.share_embeddings else params["msp.tok_emb"]


def msp_logits(targets: Sequence[Sequence[int]], cond: Tensor, params: Params,
               config: ModelConfig, rng: np.random.Generator | None = None
               ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Teacher-forced decoder logits for a batch of sentences.

    Each target is ``BOS w_1 ... EOS``; position j (from 0) reads the prefix
    up to token j and predicts token j + 1. Returns logits (N*L, V), the flat
    gold ids and a flat mask of real (non-padding) positions.
    """
    N = len(targets)
    L = max(len(t) for t in targets) - 1
    if L < 1 or any(len(t) < 2 for t in targets):
        raise ValueError("each target sentence needs at least BOS and EOS")
    if L > config.max_tokens:
        raise ValueError("target sentence longer than the decoder position table")
    inp = np.full((N, L), PAD_ID, dtype=np.int64)
    gold = np.full((N, L), PAD_ID, dtype=np.int64)
    real = np.zeros((N, L), dtype=bool)
    for n, t in enumerate(targets):
        m = len(t) - 1
        inp[n, :m] = t[:-1]
        gold[n, :m] = t[1:]
        real[n, :m] = True
    x = ad.embedding(_msp_embedding(params, config), inp) + ad.take(params["msp.pos"], slice(0, L))
    x = ad.dropout(x, config.dropout, rng)
    mask = causal_mask(L)
    for l in range(config.decoder_layers):
        x, _ = transformer_block(x, params, f"msp.block.{l}", config, mask, cond=cond, rng=rng)
    logits = ad.matmul(x, params["msp.w_out"])
    return logits.reshape(N * L, config.vocab_size), gold.reshape(-1), real.reshape(-1)


def msp_decode_logprob(target: Sequence[int], h_cond, params: Params,
                       config: ModelConfig) -> np.ndarray:
    """log p(w_j | w_{0:j-1}, conditioning) for j = 1..len(target)-1."""
    if len(target) < 2:
        raise ValueError("target must contain at least BOS and EOS")
    cond = ad.as_tensor(h_cond).reshape(1, config.d_model)
    with ad.no_grad():
        logits, gold, _ = msp_logits([list(target)], cond, params, config)
        logp = ad.log_softmax(logits, axis=-1).data
    return logp[np.arange(len(gold)), gold]


def msp_log_softmax(target: Sequence[int], h_cond, params: Params, config: ModelConfig) -> np.ndarray:
    """Full (len(target)-1, V) log-distribution at every decoding position."""
    cond = ad.as_tensor(h_cond).reshape(1, config.d_model)
    with ad.no_grad():
        logits, _, _ = msp_logits([list(target)], cond, params, config)
        return ad.log_softmax(logits, axis=-1).data


# pointer decoder

def pointer_log_probs(Hp: Tensor, sent_mask: np.ndarray, prev: Sequence[Sequence[int]],
                      params: Params, config: ModelConfig,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced pointer distributions.

    ``Hp`` is (B, S, d) sentence representations of the shuffled documents;
    ``prev[b]`` lists the decoded slots P_1..P_{t-1} (0-based) fed after the
    start marker. Returns log p over the S slots for every decoder step,
    shape (B, len(prev)+1, S).
    """
    B, S, d = Hp.shape
    steps = max(len(p) for p in prev) + 1
    if steps > config.max_sentences:
        raise ValueError("more decoding steps than the step position table holds")
    gather = np.zeros((B, steps), dtype=np.int64)
    gate = np.zeros((B, steps, 1))
    orig = np.zeros((B, steps), dtype=np.int64)
    for b, p in enumerate(prev):
        for k, slot in enumerate(p, 1):
            if not 0 <= slot < S:
                raise IndexError(f"slot {slot} out of range for {S} sentences")
            gather[b, k] = slot
            gate[b, k] = 1.0
            orig[b, k] = slot + 1
    x = ad.take(Hp, (np.arange(B)[:, None], gather)) * gate
    x = x + ad.take(params["ptr.step_pos"], slice(0, steps)) + ad.embedding(params["ptr.orig_pos"], orig)
    x = ad.dropout(x, config.dropout, rng)
    mask = causal_mask(steps)
    for l in range(config.decoder_layers):
        x, _ = transformer_block(x, params, f"ptr.block.{l}", config, mask, rng=rng)
    q = ad.matmul(x, params["ptr.u_a"].transpose(1, 0))            # (B, steps, d)
    k = ad.matmul(Hp, params["ptr.w_a"].transpose(1, 0))           # (B, S, d)
    e = ad.tanh(q.reshape(B, steps, 1, d) + k.reshape(B, 1, S, d))  # (B, steps, S, d)
    scores = ad.matmul(e, params["ptr.v_a"]).reshape(B, steps, S)
    return ad.log_softmax(scores, axis=-1, mask=sent_mask[:, None, :])


def pointer_decode_step(prefix: Sequence[int], Hp, params: Params, config: ModelConfig) -> np.ndarray:
    """p(P_t | P_0..P_{t-1}, D') over all |D'| slots, where ``prefix`` holds
    the 0-based slots already decoded (t = len(prefix) + 1)."""
    Hp = ad.as_tensor(Hp)
    S = Hp.shape[0]
    if len(prefix) >= S:
        raise ValueError(f"step {len(prefix) + 1} exceeds document length {S}")
    with ad.no_grad():
        logp = pointer_log_probs(Hp.reshape(1, S, Hp.shape[1]), np.ones((1, S), dtype=bool),
                                 [list(prefix)], params, config)
    return np.exp(logp.data[0, -1])


# checkpoints

def save_checkpoint(path, params: Params, config: ModelConfig) -> None:
    """Write a length-prefixed JSON manifest followed by little-endian float64 payload.

    Layout: ``uint64 header_len`` | header (UTF-8 JSON with ``config`` and
    ``params`` = [{name, shape, offset}] sorted by name) | concatenated data.
    """
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, config))


def checkpoint_bytes(params: Params, config: ModelConfig) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": asdict(config), "params": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    meta = json.loads(raw[8:8 + hlen].decode("utf-8"))
    payload = memoryview(raw)[8 + hlen:]
    params = {}
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        params[entry["name"]] = Tensor(arr.reshape(shape).astype(np.float64), requires_grad=True,
                                       name=entry["name"])
    return params, ModelConfig.from_dict(meta["config"])


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}

