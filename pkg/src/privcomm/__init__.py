"""Communication-efficient differentially private mean and frequency estimation."""
from .accountant import NoiseCalibration, PrivacyBudget, RdpCurve
from .errors import (
    ConfigError,
    DimensionError,
    InfeasibleError,
    KashinConvergenceError,
    OutOfRangeError,
    PrivcommError,
    ProtocolViolation,
)
from .freq_est import FreqEstimate, OneHotItem, RhrReport, rhr_run
from .mean_est import CsgmConfig, MeanEstimate, csgm_preselect_run, csgm_run, l2_mean_pipeline
from .rng import Seeds
from .shuffle import ShufflePlan, SqkrReport, plan_shuffled_sqkr, shuffled_sqkr_run
from .stats import TranscriptStats
from .transforms import KashinFrame, SignVector, fwht, kashin_decode, kashin_encode

__version__ = "0.1.0"
