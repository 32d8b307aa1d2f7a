"""
flowhmm

Hidden Markov models with normalizing-flow mixture emissions (RealNVP and Glow), a Gaussian
mixture baseline, hybrid EM training, maximum-likelihood classification and voting fusion.
"""

__version__ = "0.3.0"
__author__ = "flowhmm developers"
__description__ = "Flow-based HMMs for sequence classification"

from flowhmm.classify import ClassifierBank, classify, fuse, vote
from flowhmm.config import Config
from flowhmm.hmm import HmmModel, MarkovChain
from flowhmm.trainer import HybridTrainer, train_class_set

__all__ = [
    "ClassifierBank",
    "Config",
    "HmmModel",
    "HybridTrainer",
    "MarkovChain",
    "classify",
    "fuse",
    "train_class_set",
    "vote",
]
