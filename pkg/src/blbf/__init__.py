"""Synthetic workbench for off-policy evaluation and learning from logged banner impressions."""

from .estimators import (EstimateReport, EstimatorAccumulator, control_variate, diagnostic_sweep,
                         evaluate_policy, ips_estimate, n_hat, snips_estimate)
from .logformat import CandidateRecord, ImpressionRecord, parse_impression, serialize_impression
from .policies import EpsilonMixturePolicy, LinearRankingPolicy, UniformPolicy
from .simulator import GroundTruthModel, Simulator, WorldConfig, generate_log, true_policy_value

__version__ = "0.1.0"
