"""Finite-difference verification of every differentiable op and of the joint
pre-training loss on a tiny model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EncodedDocument, MaskedInstance, make_shuffled, mask_sentence, MASKED
from .model import ModelConfig, init_params

TOLERANCE = 1e-4

# an op check builds (loss_fn, named leaf tensors) from an rng
OpCheck = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _unary(fn, low=-1.0, high=1.0):
    def build(rng):
        x = _leaf(rng, 3, 4, low=low, high=high)
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(fn(x), w)), {"x": x}
    return build


def _binary(fn, positive_b=False):
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4, low=0.5, high=1.5) if positive_b else _leaf(rng, 4)
        w = rng.normal(size=(3, 4))
        return (lambda: _weighted(fn(a, b), w)), {"a": a, "b": b}
    return build


def _relu_input(rng):
    # keep clear of the kink at 0
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted(ad.relu(x), w)), {"x": x}


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: _weighted(ad.matmul(a, b), w)), {"a": a, "b": b}


def _batched_matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda: _weighted(ad.matmul(a, b), w)), {"a": a, "b": b}


def _softmax(rng):
    x = _leaf(rng, 2, 3, 4, low=-3, high=3)
    mask = np.array([True, True, False, True])
    w = rng.normal(size=(2, 3, 4))
    return (lambda: _weighted(ad.softmax(x, axis=-1, mask=mask), w)), {"x": x}


def _log_softmax(rng):
    x = _leaf(rng, 3, 5, low=-3, high=3)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted(ad.log_softmax(x, axis=-1), w)), {"x": x}


def _layer_norm(rng):
    x = _leaf(rng, 2, 3, 6, low=-2, high=2)
    g, b = _leaf(rng, 6, low=0.5, high=1.5), _leaf(rng, 6)
    w = rng.normal(size=(2, 3, 6))
    return (lambda: _weighted(ad.layer_norm(x, g, b), w)), {"x": x, "gain": g, "bias": b}


def _cross_entropy(rng):
    logits = _leaf(rng, 4, 6, low=-2, high=2)
    targets = rng.integers(0, 6, size=4)
    return (lambda: ad.cross_entropy(logits, targets)), {"logits": logits}


def _weighted_cross_entropy(rng):
    logits = _leaf(rng, 4, 6, low=-2, high=2)
    targets = rng.integers(0, 6, size=4)
    weights = np.array([0.5, 0.0, 1.0, 0.25])
    return (lambda: ad.cross_entropy(logits, targets, weights)), {"logits": logits}


def _reduce_reshape(rng):
    x = _leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3))
    return (lambda: _weighted(x.mean(axis=0).transpose(1, 0).reshape(4, 3), w) + x.sum()), {"x": x}


def _take(rng):
    x = _leaf(rng, 3, 4, 2)
    idx = (np.array([[0, 2], [1, 1]]), np.array([[3, 0], [1, 1]]))
    w = rng.normal(size=(2, 2, 2))
    return (lambda: _weighted(ad.take(x, idx), w)), {"x": x}


def _embedding(rng):
    table = _leaf(rng, 5, 3)
    ids = np.array([[0, 4, 4], [2, 0, 1]])
    w = rng.normal(size=(2, 3, 3))
    return (lambda: _weighted(ad.embedding(table, ids), w)), {"table": table}


def _dropout(rng):
    x = _leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    seed = int(rng.integers(1 << 30))
    return (lambda: _weighted(ad.dropout(x, 0.3, np.random.default_rng(seed)), w)), {"x": x}


OP_CHECKS: dict[str, OpCheck] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, low=0.2, high=2.0),
    "tanh": _unary(ad.tanh),
    "relu": _relu_input,
    "gelu": _unary(ad.gelu, low=-3, high=3),
    "matmul": _matmul,
    "matmul_batched": _batched_matmul,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "cross_entropy": _cross_entropy,
    "cross_entropy_weighted": _weighted_cross_entropy,
    "sum_mean_reshape_transpose": _reduce_reshape,
    "take": _take,
    "embedding": _embedding,
    "dropout": _dropout,
}


def tiny_model_config(vocab_size: int = 12) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=8, n_heads=2, token_layers=2, sentence_layers=2,
                       decoder_layers=1, max_tokens=12, max_sentences=3, init_scale=0.5)


def joint_loss_check(seed: int = 0):
    """Joint MSP + SS loss of a 2-sentence document under a d_model=8 model."""
    from .pretrain import msp_loss, ss_loss

    config = tiny_model_config()
    params = init_params(config, seed)
    doc = EncodedDocument([[0, 5, 6, 1], [0, 7, 8, 9, 1]], doc_id="gradcheck")
    masked = EncodedDocument([doc.sentences[0], mask_sentence(doc.sentences[1])], doc_id="gradcheck")
    minst = MaskedInstance(doc, masked, [1], {1: MASKED})
    sinst = make_shuffled(doc, np.random.default_rng(seed), order=[1, 0])

    def loss():
        return msp_loss(minst, params, config) + ss_loss(sinst, params, config)

    return loss, params


def run_gradcheck(ops: dict[str, OpCheck] | None = None, seed: int = 0, tol: float = TOLERANCE,
                  include_model: bool = True, h: float = 1e-5) -> list[CheckResult]:
    ops = OP_CHECKS if ops is None else ops
    results = []
    for name, build in ops.items():
        t0 = time.perf_counter()
        loss_fn, tensors = build(np.random.default_rng(seed))
        err = max(ad.gradcheck(loss_fn, tensors, h=h).values())
        results.append(CheckResult(name, err, err < tol, time.perf_counter() - t0))
    if include_model:
        t0 = time.perf_counter()
        loss_fn, params = joint_loss_check(seed)
        errs = ad.gradcheck(loss_fn, params, h=h)
        err = max(errs.values())
        results.append(CheckResult("joint_msp_ss_loss", err, err < tol, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
