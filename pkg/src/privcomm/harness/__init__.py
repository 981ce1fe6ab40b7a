"""Experiment harness: synthetic data, sweeps, output and CLI."""
from .config import ExperimentConfig
from .data import gen_synthetic_freq, gen_synthetic_mean
from .sweep import TrialResult, account_run, run_sweep
