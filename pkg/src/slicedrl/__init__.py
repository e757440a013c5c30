"""Deep Q-network slice-weight control on a simulated two-slice gNB."""
from .core import (
    ActionSpace,
    ConfigurationError,
    DelayTable,
    IncompleteDatasetError,
    QuantizerConfig,
    RewardSpec,
    SliceState,
    encode_state,
    feasible_set,
    oracle_policy,
    quantize_arrival_rate,
    reward,
    target_weight,
)
from .dqn import DatasetEnv, DqnConfig, QNetwork, ReplayBuffer, extract_policy, train_offline
from .estimators import ArrivalRateQuantizer, DQNSliceAllocator, OracleSliceAllocator
from .kpm import KpmRecord, SliceKpm
from .policy import FixedWeight, PolicyError, ProportionalFair, TrainedPolicy
from .ransim import GnbConfig, GnbSim, run_experiment
from .traffic import TrafficProfile

__version__ = "0.1.0"

__all__ = [
    "ActionSpace", "ConfigurationError", "DelayTable", "IncompleteDatasetError", "QuantizerConfig",
    "RewardSpec", "SliceState", "encode_state", "feasible_set", "oracle_policy",
    "quantize_arrival_rate", "reward", "target_weight",
    "DatasetEnv", "DqnConfig", "QNetwork", "ReplayBuffer", "extract_policy", "train_offline",
    "ArrivalRateQuantizer", "DQNSliceAllocator", "OracleSliceAllocator",
    "KpmRecord", "SliceKpm", "FixedWeight", "PolicyError", "ProportionalFair", "TrainedPolicy",
    "GnbConfig", "GnbSim", "run_experiment", "TrafficProfile",
]
