"""Relevance-regularized 1-D convolutional classifiers for mass spectra.

A small reverse-mode autodiff engine supplies the second-order gradients the
relevance penalty needs; the rest of the package builds the network, the
synthetic two-lab cohorts and the inter-lab evaluation on top of it.
"""

try:
    from importlib.metadata import PackageNotFoundError, version
    __version__ = version("drrspec")
except Exception:  # not installed, e.g. running from a source checkout
    __version__ = "0.1.0"

from .kernels import BACKEND
from .model import (ModelParams, Spectrum, build_isotopenet_lite, classify, load_checkpoint,
                    save_checkpoint)
from .training import TrainConfig, train
from .attribution import lrp_z, mean_relevance, relevance, saliency
from .cohort import Cohort, SynthConfig, export_cohort, generate_cohort, import_cohort
from .evaluation import CVSettings, balanced_accuracy, nested_cv

__all__ = [
    "BACKEND", "Cohort", "CVSettings", "ModelParams", "Spectrum", "SynthConfig", "TrainConfig",
    "balanced_accuracy", "build_isotopenet_lite", "classify", "export_cohort", "generate_cohort",
    "import_cohort", "load_checkpoint", "lrp_z", "mean_relevance", "nested_cv", "relevance",
    "saliency", "save_checkpoint", "train",
]
