"""Metrics, sweeps, configuration, run persistence and the command line."""

from .metrics import EvalResult, eval_model

__all__ = ["EvalResult", "eval_model"]
