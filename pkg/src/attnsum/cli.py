"""``attnsum`` command line: vocab, pre-training, summarization, evaluation,
position analysis, score blending, hyper-parameter sweeps and gradient checks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .config import ConfigError, RunConfig, coerce
from .corpus import CorpusError, Document, Vocab, build_vocab, load_corpus, save_corpus
from .datasets import make_toy_corpus
from .estimator import encode_corpus, summarize_documents
from .evaluation import (average_scores, evaluate_corpus, histogram_csv, kl_table_csv, lead_k,
                         oracle_extract, position_histogram, position_kl, rouge_scores,
                         rouge_table_csv)
from .gradcheck import OP_CHECKS, TOLERANCE, format_report, run_gradcheck
from .model import collate, encode_batch, init_params, load_checkpoint, save_checkpoint
from .pretrain import train
from .rank import (RankConfig, combine_external, combine_iterate, normalize_scores,
                   select_summary, sentence_probs)

logger = logging.getLogger("attnsum")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
    return rows


def _jsonl(records) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)


def _run_config(args, flag_keys: dict[str, str]) -> RunConfig:
    """Config file, then ``--set`` pairs, then dedicated flags (last wins)."""
    overrides = {}
    for pair in args.set or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        overrides[key.strip()] = coerce(key.strip(), raw)
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.load(args.config, overrides)


def _corpus(path) -> list[Document]:
    if not path:
        raise UsageError("no corpus path given (--corpus or paths.corpus)")
    return load_corpus(path)


def _model(checkpoint, vocab_path):
    if not checkpoint:
        raise UsageError("no checkpoint given (--checkpoint or paths.checkpoint)")
    if not vocab_path:
        raise UsageError("no vocab given (--vocab or paths.vocab)")
    params, config = load_checkpoint(checkpoint)
    vocab = Vocab.load(vocab_path)
    if len(vocab) != config.vocab_size:
        raise DataError(f"vocab {vocab_path} has {len(vocab)} entries but checkpoint "
                        f"{checkpoint} expects {config.vocab_size}")
    return params, config, vocab


def _load_summaries(path) -> dict[str, dict]:
    out = {}
    for row in _read_jsonl(path):
        if "doc_id" not in row or "indices" not in row:
            raise DataError(f"{path}: summary records need doc_id and indices")
        out[str(row["doc_id"])] = row
    return out


def _summary_sentences(row: dict, doc: Document | None) -> list[str]:
    if "sentences" in row:
        return list(row["sentences"])
    if doc is None:
        raise DataError(f"{row['doc_id']}: no sentences in summary and not in corpus")
    return [doc.sentences[i] for i in row["indices"]]


def _common_parent(sub, config=True):
    if config:
        sub.add_argument("--config", help="key=value config file")
        sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override one config key (repeatable)")


# ---------------------------------------------------------------- commands

def cmd_make_toy(args) -> int:
    docs = make_toy_corpus(args.n_docs, random_state=args.seed)
    save_corpus(docs, args.out)
    print(f"wrote {len(docs)} documents to {args.out}")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    rc = _run_config(args, {"corpus": "paths.corpus", "min_count": "corpus.min_count",
                            "out": "paths.vocab"})
    vocab = build_vocab(_corpus(rc["paths.corpus"]), rc["corpus.min_count"])
    if not rc["paths.vocab"]:
        raise UsageError("no output path given (--out or paths.vocab)")
    Path(rc["paths.vocab"]).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(rc["paths.vocab"])
    print(f"vocab size {len(vocab)} -> {rc['paths.vocab']}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    flags = {"corpus": "paths.corpus", "vocab": "paths.vocab", "out": "paths.output",
             "epochs": "train.epochs", "seed": "seed"}
    rc = _run_config(args, flags)
    if args.objectives is not None:
        rc.set("train.enable_ss", args.objectives == "msp+ss")
    out = Path(rc["paths.output"] or "run")
    if not rc["paths.vocab"]:
        raise UsageError("no vocab given (--vocab or paths.vocab)")
    docs = _corpus(rc["paths.corpus"])
    vocab = Vocab.load(rc["paths.vocab"])
    config = rc.model_config(len(vocab))
    tc = rc.train_config(checkpoint_dir=str(out / "checkpoints"))
    rc.set("paths.checkpoint", str(out / "model.ckpt"))
    encoded = encode_corpus(docs, vocab, config)
    params = init_params(config, rc["seed"])
    params, report = train(encoded, params, config, tc, log_every=args.log_every)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", params, config)
    _write_text(out / "losses.csv", report.to_csv(tc.enable_ss))
    _write_text(out / "config.txt", rc.to_text())
    last = report.steps[-1]["total"] if report.steps else float("nan")
    print(f"{len(report.steps)} steps, final loss {last:.4f} -> {out}")
    return EXIT_OK


_RANK_FLAGS = {"gamma1": "rank.gamma1", "gamma2": "rank.gamma2", "T": "rank.T",
               "direction": "rank.attention_direction", "summary_len": "rank.summary_len",
               "threads": "threads", "checkpoint": "paths.checkpoint", "vocab": "paths.vocab",
               "corpus": "paths.corpus", "out": "paths.output"}


def _apply_rank_switches(args, rc: RunConfig) -> None:
    if args.no_trigram_blocking:
        rc.set("rank.use_trigram_blocking", False)
    if args.uniform_rtilde:
        rc.set("rank.uniform_r_tilde", True)
    if args.zero_rprime:
        rc.set("rank.zero_r_prime", True)
    if args.no_renorm:
        rc.set("rank.no_renorm", True)


def cmd_summarize(args) -> int:
    rc = _run_config(args, _RANK_FLAGS)
    _apply_rank_switches(args, rc)
    rank = rc.rank_config()
    params, config, vocab = _model(rc["paths.checkpoint"], rc["paths.vocab"])
    docs = _corpus(rc["paths.corpus"])
    summaries = summarize_documents(docs, vocab, params, config, rank, rc["threads"])
    out = rc["paths.output"]
    text = _jsonl(s.to_record() for s in summaries)
    if out:
        _write_text(out, text)
        _write_text(str(out) + ".config.txt", rc.to_text())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    docs = {d.doc_id: d for d in _corpus(args.corpus)}
    refs = {k: d.reference_summary for k, d in docs.items()}
    systems = {}
    if args.summaries:
        rows = _load_summaries(args.summaries)
        cands = {k: _summary_sentences(r, docs.get(k)) for k, r in rows.items()}
        agg, _, problems = evaluate_corpus(cands, refs)
        for p in problems:
            print(f"attnsum: warning: {p}", file=sys.stderr)
        if agg is None:
            raise DataError("no document could be scored (missing references?)")
        systems[args.name] = agg
    for base in args.baseline or ():
        scorable = [d for d in docs.values() if d.reference_summary]
        if not scorable:
            raise DataError("baselines need reference summaries")
        pick = (lambda d: lead_k(d, 3)) if base == "lead3" else (lambda d: oracle_extract(d, 3))
        systems[base.upper().replace("LEAD3", "LEAD-3")] = average_scores(
            [rouge_scores([d.sentences[i] for i in pick(d)], d.reference_summary) for d in scorable])
    if not systems:
        raise UsageError("nothing to evaluate: give --summaries and/or --baseline")
    text = rouge_table_csv(systems)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_positions(args) -> int:
    docs = {d.doc_id: d for d in _corpus(args.corpus)}
    scorable = [d for d in docs.values() if d.reference_summary]
    if not scorable:
        raise DataError("the ORACLE distribution needs reference summaries")
    oracle = position_histogram([oracle_extract(d, 3) for d in scorable], args.K)
    hists = {"ORACLE": oracle}
    for item in args.summaries:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        rows = _load_summaries(path)
        hists[name] = position_histogram([r["indices"] for r in rows.values()], args.K)
    if args.lead3:
        hists["LEAD-3"] = position_histogram([lead_k(d, 3) for d in docs.values()], args.K)
    kls = {n: position_kl(h, oracle) for n, h in hists.items() if n != "ORACLE"}
    prefix = args.out_prefix
    _write_text(f"{prefix}_hist.csv", histogram_csv(hists))
    _write_text(f"{prefix}_kl.csv", kl_table_csv(kls))
    for n, v in kls.items():
        print(f"KL({n} || ORACLE) = {v:.6f}")
    return EXIT_OK


def cmd_combine(args) -> int:
    docs = {d.doc_id: d for d in _corpus(args.corpus)}
    rows = _load_summaries(args.summaries)
    external = {str(r["doc_id"]): r["scores"] for r in _read_jsonl(args.external)}
    rank = RankConfig(summary_len=args.summary_len,
                      use_trigram_blocking=not args.no_trigram_blocking)
    out = []
    for doc_id, row in rows.items():
        if doc_id not in external:
            raise DataError(f"{doc_id}: no external scores")
        if doc_id not in docs:
            raise DataError(f"{doc_id}: not found in corpus")
        r = row["scores"]["r"]
        combined = combine_external(r, external[doc_id], args.weight)
        kept = docs[doc_id].sentences[:len(r)]
        idx = select_summary(kept, combined, rank)
        out.append({"doc_id": doc_id, "indices": idx, "sentences": [kept[i] for i in idx],
                    "scores": {"combined": [float(x) for x in combined]}})
    text = _jsonl(out)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    rc = _run_config(args, {"checkpoint": "paths.checkpoint", "vocab": "paths.vocab",
                            "corpus": "paths.corpus"})
    params, config, vocab = _model(rc["paths.checkpoint"], rc["paths.vocab"])
    docs = [d for d in _corpus(rc["paths.corpus"]) if d.reference_summary]
    if not docs:
        raise DataError("the sweep corpus needs reference summaries")
    # r_hat and A do not depend on the ranking knobs: compute them once
    cached = []
    for d, enc in zip(docs, encode_corpus(docs, vocab, config)):
        r_hat = sentence_probs(enc, params, config)
        with ad.no_grad():
            _, _, A = encode_batch(collate([enc], config), params, config)
        cached.append((d, r_hat, A[0]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma1", "gamma2", "T", "rouge1_f1", "rouge2_f1", "rougeL_f1", "mean_f1"])
    best = None
    grid = itertools.product(_floats(args.gamma1), _floats(args.gamma2), [int(t) for t in _floats(args.T)])
    for g1, g2, T in grid:
        try:
            rank = RankConfig(gamma1=g1, gamma2=g2, T=T, summary_len=rc["rank.summary_len"],
                              use_trigram_blocking=rc["rank.use_trigram_blocking"],
                              attention_direction=rc["rank.attention_direction"])
        except ValueError as e:
            logger.warning("skipping gamma1=%g gamma2=%g T=%d: %s", g1, g2, T, e)
            continue
        per_doc = []
        for d, r_hat, A in cached:
            scores = combine_iterate(normalize_scores(r_hat), A, rank, r_hat=r_hat)
            kept = d.sentences[:len(r_hat)]
            idx = select_summary(kept, scores, rank)
            per_doc.append(rouge_scores([kept[i] for i in idx], d.reference_summary))
        agg = average_scores(per_doc)
        mean = (agg.rouge1.f1 + agg.rouge2.f1 + agg.rougeL.f1) / 3
        w.writerow([g1, g2, T] + [f"{x:.6f}" for x in (agg.rouge1.f1, agg.rouge2.f1, agg.rougeL.f1, mean)])
        if best is None or mean > best[0]:
            best = (mean, g1, g2, T)
    if best is None:
        raise UsageError("the grid contained no valid setting")
    if args.out:
        _write_text(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    print(f"best: gamma1={best[1]:g} gamma2={best[2]:g} T={best[3]} mean F1 {best[0]:.4f}",
          file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = OP_CHECKS
    if args.ops:
        unknown = [o for o in args.ops if o not in OP_CHECKS]
        if unknown:
            raise UsageError(f"unknown ops: {', '.join(unknown)}")
        ops = {o: OP_CHECKS[o] for o in args.ops}
    results = run_gradcheck(ops, seed=args.seed, tol=args.tol, include_model=not args.ops_only)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnsum", description=__doc__.split("\n\n")[0].replace("\n", " "),
                epilog=__doc__.split("\n\n")[1].strip())
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-toy", help="write a synthetic corpus with reference summaries")
    s.add_argument("--n-docs", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("build-vocab", help="build a vocabulary from a JSONL corpus")
    _common_parent(s)
    s.add_argument("--corpus")
    s.add_argument("--min-count", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("pretrain", help="pre-train the encoder and decoders")
    _common_parent(s)
    s.add_argument("--corpus")
    s.add_argument("--vocab")
    s.add_argument("--out", help="output directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--objectives", choices=["msp", "msp+ss"])
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("summarize", help="rank sentences and write summaries as JSONL")
    _common_parent(s)
    s.add_argument("--checkpoint")
    s.add_argument("--vocab")
    s.add_argument("--corpus")
    s.add_argument("--out")
    s.add_argument("--gamma1", type=float)
    s.add_argument("--gamma2", type=float)
    s.add_argument("--T", type=int)
    s.add_argument("--direction", choices=["ji", "ij"])
    s.add_argument("--summary-len", type=int)
    s.add_argument("--no-trigram-blocking", action="store_true")
    s.add_argument("--uniform-rtilde", action="store_true")
    s.add_argument("--zero-rprime", action="store_true")
    s.add_argument("--no-renorm", action="store_true")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("evaluate", help="ROUGE table for summaries and baselines")
    s.add_argument("--summaries")
    s.add_argument("--corpus", required=True)
    s.add_argument("--baseline", action="append", choices=["lead3", "oracle"])
    s.add_argument("--name", default="model", help="row label for --summaries")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("positions", help="position histograms and KL to ORACLE")
    s.add_argument("--summaries", nargs="+", required=True, metavar="[NAME=]FILE")
    s.add_argument("--corpus", required=True)
    s.add_argument("--K", type=int, default=12)
    s.add_argument("--lead3", action="store_true", help="also report LEAD-3")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_positions)

    s = sub.add_parser("combine", help="blend model scores with an external ranker")
    s.add_argument("--summaries", required=True)
    s.add_argument("--external", required=True, help="JSONL of {doc_id, scores}")
    s.add_argument("--corpus", required=True)
    s.add_argument("--weight", type=float, default=0.9, help="weight of the model scores")
    s.add_argument("--summary-len", type=int, default=3)
    s.add_argument("--no-trigram-blocking", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_combine)

    s = sub.add_parser("sweep", help="grid-search gamma1, gamma2, T on a validation corpus")
    _common_parent(s)
    s.add_argument("--checkpoint")
    s.add_argument("--vocab")
    s.add_argument("--corpus")
    s.add_argument("--gamma1", default="0,0.5,1")
    s.add_argument("--gamma2", default="0,0.5,1")
    s.add_argument("--T", default="1,2,3")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the joint loss")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=TOLERANCE)
    s.add_argument("--ops", nargs="+", help="restrict to these ops")
    s.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:   # --help, --version and usage errors
        return e.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"attnsum: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, OSError, KeyError, ValueError, IndexError) as e:
        print(f"attnsum: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
