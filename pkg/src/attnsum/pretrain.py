"""Joint masked-sentence-prediction + sentence-shuffling pre-training."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EncodedDocument, MaskedInstance, ShuffledInstance, make_masked, make_shuffled
from .model import (ModelConfig, Params, collate, copy_params, encode_batch, msp_logits,
                    param_group, pointer_log_probs, save_checkpoint)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    encoder_lr: float = 4e-5
    decoder_lr: float = 4e-4
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    enable_msp: bool = True
    enable_ss: bool = True
    raw_sum_loss: bool = False
    warmup_steps: int = 0

    def __post_init__(self):
        if not self.enable_msp:
            raise ValueError("enable_msp must be true: sentence ranking needs the MSP decoder")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TrainReport:
    steps: list[dict] = field(default_factory=list)
    epoch_means: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    best_epoch: int | None = None

    def to_csv(self, ss_enabled: bool = True) -> str:
        buf = io.StringIO()
        cols = ["step", "msp_loss", "ss_loss", "total"] if ss_enabled else ["step", "msp_loss", "total"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.steps:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])
        return buf.getvalue()


def _doc_weights(counts: Sequence[int], raw_sum: bool) -> list[float]:
    if raw_sum:
        return [1.0] * len(counts)
    return [1.0 / (c * len(counts)) for c in counts]


def msp_loss(instances: MaskedInstance | Sequence[MaskedInstance], params: Params,
             config: ModelConfig, raw_sum: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Negative log-likelihood of the original masked sentences.

    Per document the sum over masked sentences and tokens is divided by the
    number of predicted tokens, then averaged over documents. ``raw_sum``
    returns the plain sum instead.
    """
    if isinstance(instances, MaskedInstance):
        instances = [instances]
    if any(not inst.masked_indices for inst in instances):
        raise ValueError("masked instance has no masked sentences")
    H, _, _ = encode_batch(collate([inst.masked for inst in instances], config), params, config, rng)
    doc_idx, sent_idx, targets, counts = [], [], [], []
    for b, inst in enumerate(instances):
        n_tok = 0
        for i in inst.masked_indices:
            doc_idx.append(b)
            sent_idx.append(i)
            targets.append(inst.source.sentences[i])
            n_tok += len(inst.source.sentences[i]) - 1
        counts.append(n_tok)
    cond = ad.take(H, (np.array(doc_idx), np.array(sent_idx)))
    logits, gold, real = msp_logits(targets, cond, params, config, rng)
    L = len(real) // len(targets)
    dw = _doc_weights(counts, raw_sum)
    w = np.repeat([dw[b] for b in doc_idx], L) * real
    return ad.cross_entropy(logits, gold, w)


def ss_loss(instances: ShuffledInstance | Sequence[ShuffledInstance], params: Params,
            config: ModelConfig, raw_sum: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced pointer loss, -sum_t log p(P_t | P_<t, D') / |D| averaged over documents."""
    if isinstance(instances, ShuffledInstance):
        instances = [instances]
    logp, targets, w = _pointer_forward(instances, params, config, raw_sum, rng)
    B, steps, _ = logp.shape
    picked = ad.take(logp, (np.arange(B)[:, None], np.arange(steps)[None, :], targets))
    return -(picked * w).sum()


def _pointer_forward(instances, params, config, raw_sum=False, rng=None):
    batch = collate([inst.permuted for inst in instances], config)
    Hp, _, _ = encode_batch(batch, params, config, rng)
    prev = [inst.positions[:-1] for inst in instances]
    logp = pointer_log_probs(Hp, batch.sent_mask, prev, params, config, rng)
    B, steps, _ = logp.shape
    targets = np.zeros((B, steps), dtype=np.int64)
    w = np.zeros((B, steps))
    dw = _doc_weights([len(inst.positions) for inst in instances], raw_sum)
    for b, inst in enumerate(instances):
        n = len(inst.positions)
        targets[b, :n] = inst.positions
        w[b, :n] = dw[b]
    return logp, targets, w


def pointer_accuracy(instances: Sequence[ShuffledInstance], params: Params, config: ModelConfig) -> float:
    """Fraction of teacher-forced steps whose argmax slot is the gold slot."""
    with ad.no_grad():
        logp, targets, w = _pointer_forward(instances, params, config)
    pred = logp.data.argmax(axis=-1)
    real = w > 0
    return float((pred == targets)[real].mean())


def _build_optimizer(params: Params, tc: TrainConfig) -> ad.Adam:
    enc = [params[k] for k in sorted(params) if param_group(k) == "encoder"]
    dec = [params[k] for k in sorted(params)
           if param_group(k) == "decoder" and (tc.enable_ss or not k.startswith("ptr."))]
    return ad.Adam({"encoder": (enc, tc.encoder_lr), "decoder": (dec, tc.decoder_lr)})


def length_batches(docs: Sequence[EncodedDocument], batch_size: int) -> list[list[int]]:
    """Chunk document indices sorted by flat length so batches pad little."""
    order = sorted(range(len(docs)), key=lambda i: (docs[i].n_tokens, i))
    return [order[k:k + batch_size] for k in range(0, len(order), batch_size)]


def train(docs: Sequence[EncodedDocument], params: Params, config: ModelConfig,
          tc: TrainConfig, validation: Callable[[Params], float] | None = None,
          log_every: int = 0) -> tuple[Params, TrainReport]:
    """Pre-train ``params`` in place and return them with the loss report.

    Every epoch draws a fresh masked and shuffled instance per document.
    With ``validation`` the best-scoring epoch's parameters are returned.
    """
    if not docs:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(tc.seed)
    drop_rng = np.random.default_rng([tc.seed, 1]) if config.dropout > 0 else None
    pool = [s for d in docs for s in d.sentences]
    opt = _build_optimizer(params, tc)
    base_lrs = list(opt.lrs)
    report = TrainReport()
    best_score, best_params = -np.inf, None
    batches = length_batches(docs, tc.batch_size)
    step = 0
    start = time.perf_counter()
    for epoch in range(tc.epochs):
        sums = {"msp_loss": 0.0, "ss_loss": 0.0, "total": 0.0}
        for bi in rng.permutation(len(batches)):
            batch = [docs[i] for i in batches[bi]]
            masked = [make_masked(d, rng, pool) for d in batch]
            shuffled = [make_shuffled(d, rng) for d in batch] if tc.enable_ss else []
            opt.zero_grad()
            lm = msp_loss(masked, params, config, tc.raw_sum_loss, drop_rng)
            total = lm
            ls_val = 0.0
            if tc.enable_ss:
                ls = ss_loss(shuffled, params, config, tc.raw_sum_loss, drop_rng)
                total = lm + ls
                ls_val = float(ls.data)
            total.backward()
            ad.clip_grad_norm(opt.params, tc.clip_norm)
            step += 1
            if tc.warmup_steps:
                scale = min(1.0, step / tc.warmup_steps)
                opt.lrs = [lr * scale for lr in base_lrs]
            opt.step()
            row = {"step": step, "msp_loss": float(lm.data), "ss_loss": ls_val, "total": float(total.data)}
            report.steps.append(row)
            for k in sums:
                sums[k] += row[k]
            if log_every and step % log_every == 0:
                logger.info("step %d msp %.4f ss %.4f total %.4f", step, row["msp_loss"], ls_val, row["total"])
            if tc.checkpoint_every and tc.checkpoint_dir and step % tc.checkpoint_every == 0:
                Path(tc.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(tc.checkpoint_dir) / f"step_{step:06d}.ckpt", params, config)
        report.epoch_means.append({"epoch": epoch + 1, **{k: v / len(batches) for k, v in sums.items()}})
        if validation is not None:
            score = validation(params)
            if score > best_score:
                best_score, best_params, report.best_epoch = score, copy_params(params), epoch + 1
    report.wall_clock = time.perf_counter() - start
    if best_params is not None:
        for k, t in best_params.items():
            params[k].data[...] = t.data
    return params, report
