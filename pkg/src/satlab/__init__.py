"""Small numpy laboratory for gated first-layer value residuals in decoder-only language models."""

from satlab.config import DESK, SMALL, ExperimentConfig, ModelConfig, TrainConfig, load_experiment
from satlab.model import build_model, count_params, forward, forward_with_diagnostics
from satlab.training import evaluate_perplexity, lr_at, train

__version__ = "0.1.0"
