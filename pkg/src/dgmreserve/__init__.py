"""Dependent gamma model for multiple run-off triangles.

Gibbs sampling with latent Poisson counts, posterior predictive reserves,
DIC and L-measure model scores, and an ODP chain-ladder bootstrap baseline.
"""
from .gibbs import PosteriorSamples, run_chains
from .model import DgmParams, benchmark_params, dev_correlation, identifiable_params, simulate_panel
from .odp import chain_ladder, compare_models, odp_bootstrap
from .predict import dic, l_measure, predictive_draws, reserve_summary
from .triangles import ModelSpec, RunConfig, TransformSpec, TrianglePanel, load_panel

__version__ = "0.1.0"

__all__ = ["DgmParams", "ModelSpec", "PosteriorSamples", "RunConfig", "TransformSpec", "TrianglePanel",
           "benchmark_params", "chain_ladder", "compare_models", "dev_correlation", "dic",
           "identifiable_params", "l_measure", "load_panel", "odp_bootstrap", "predictive_draws",
           "reserve_summary", "run_chains", "simulate_panel"]
