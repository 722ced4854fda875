"""Toy-scale training: synthetic corpus, Adam with cosine decay, weight normalization."""

from .corpus import VOCAB, Corpus, load_corpus
from .train import (TELEMETRY_FIELDS, Adam, RunRecord, TrainConfig, evaluate, evaluate_ppl, lr_at, project_model,
                    proxy_eval, sweep_depth_width, train)
from .wnorm import norms_for_case, wnorm_project

__all__ = [
    "TELEMETRY_FIELDS", "VOCAB", "Adam", "Corpus", "RunRecord", "TrainConfig", "evaluate", "evaluate_ppl", "load_corpus",
    "lr_at", "norms_for_case", "project_model", "proxy_eval", "sweep_depth_width", "train", "wnorm_project",
]
