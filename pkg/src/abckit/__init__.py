"""Ablation-based counterfactuals for ensembles of diffusion denoisers."""

__version__ = "0.1.0"
