"""Bayesian transfer learning with learned low-rank Gaussian priors."""
from .bma import EvalReport, PredictionSet, bma_predict, evaluate
from .data import Dataset, TransferSpec, load_csv, make_transfer_pair, save_csv, split
from .model import LossKind, MlpModel, ParamLayout, augment_pair, forward, loss_and_grad
from .prior import CompositePrior, IsotropicGaussian, LowRankGaussian, rescale
from .samplers import (PosteriorTarget, SampleSet, SamplerConfig, cyclical_step_size,
                       run_chain, run_chains, run_map, step_sghmc, step_sgld, step_sgd)
from .swag import SwagConfig, SwagState, finalize
from .formats import load_prior, save_prior
from .geometry import (filter_normalize, lambda_sweep, perturbation_scan, rank_ablation,
                       top_singular_directions)

__version__ = "0.1.0"
