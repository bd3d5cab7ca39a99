"""Offline-RL dataset quality estimation with the Bellman-Wasserstein distance."""

from .approx import Network, backward, forward, init_network, init_optim, optim_step
from .bwd import (BwdConfig, BwdEstimate, PotentialPair, bwd_cost, dual_objective, estimate_bwd,
                  sinkhorn_reference, train_bwd)
from .critic import Critic, CriticConfig, ValueHead, fit_value_head, q_value, train_critic
from .dataset import Dataset, RandomPolicy, Transition
from .envgen import GridMDP, PointMassEnv, generate_dataset, make_env
from .errors import BwdqError, FormatError, InvalidArgument, InvalidState, NumericError, UndefinedCorrelation
from .iql import IqlAgent, IqlConfig, RegConfig, train_iql
from .metrics import MetricReport, mean_advantage, mean_q, mean_reward, pd_random
from .report import SuiteResult, pearson, run_suite, spearman

__version__ = "0.1.0"
