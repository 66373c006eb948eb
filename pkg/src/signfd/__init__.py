"""signSGD with majority voting and federated defense, with attack models and error bounds."""

from .aggregation import (
    CrossoverEstimate,
    FdConfig,
    FederatedDefense,
    LLRWeightTable,
    MajorityVote,
    OracleWMV,
    fd_update,
    mv_decode,
    oracle_weights,
    wmv_decode,
)
from .analysis import (
    ExponentReport,
    WeightUncertainty,
    attacked_bounds,
    exact_error_probability,
    g_exponent,
    monte_carlo_error,
    mv_bound,
    wmv_bound,
)
from .channel import AttackSpec, BscParams, apply_attack, bsc_transmit, effective_crossover
from .commcost import CostModel, total_bits
from .core import RngStream, SignVector, pack, sign_quantize, unpack

__version__ = "0.1.0"
