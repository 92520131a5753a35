"""Countermeasure recommendation for client aggression incidents.

Incident logs are segmented into episodes, turned into a Markov decision
process and used to train tabular Q-learning and SARSA agents whose greedy
policies are compared against baselines by simulation.
"""

__version__ = "0.1.0"

from .agents import (Hyperparams, MostFrequentActionPolicy, Policy, QLearningAgent, QTable,
                     SarsaAgent, SearchConfig, TDAgent, TrainConfig, grid_search, train)
from .evaluate import RewardSample, RolloutBatchConfig, rollout
from .event_log import EventLog, Incident, parse_log, read_log
from .mdp import PAPER_REWARDS, Mdp, MdpEstimator, estimate_mdp, value_iteration
from .preprocess import EpisodeSegmenter, SegmentationConfig, preprocess
from .stats import one_way_anova, tukey_hsd

__all__ = [
    "EpisodeSegmenter", "EventLog", "Hyperparams", "Incident", "Mdp", "MdpEstimator",
    "MostFrequentActionPolicy", "PAPER_REWARDS", "Policy", "QLearningAgent", "QTable",
    "RewardSample", "RolloutBatchConfig", "SarsaAgent", "SearchConfig", "SegmentationConfig",
    "TDAgent", "TrainConfig", "estimate_mdp", "grid_search", "one_way_anova", "parse_log",
    "preprocess", "read_log", "rollout", "train", "tukey_hsd", "value_iteration",
]
