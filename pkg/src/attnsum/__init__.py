"""Unsupervised extractive summarization via a pre-trained hierarchical transformer."""

__version__ = "0.1.0"

from .corpus import Document, Vocab, build_vocab, encode, load_corpus  # noqa: E402
from .estimator import AttentionSummarizer, check_documents, summarize_documents  # noqa: E402
from .evaluation import lead_k, oracle_extract, position_kl, rouge_scores  # noqa: E402
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint  # noqa: E402
from .pretrain import TrainConfig, train  # noqa: E402
from .rank import RankConfig, SentenceScores, score_document, select_summary  # noqa: E402

__all__ = [
    "AttentionSummarizer", "Document", "ModelConfig", "RankConfig", "SentenceScores",
    "TrainConfig", "Vocab", "build_vocab", "check_documents", "encode", "init_params",
    "lead_k", "load_checkpoint", "load_corpus", "oracle_extract", "position_kl",
    "rouge_scores", "save_checkpoint", "score_document", "select_summary",
    "summarize_documents", "train",
]
