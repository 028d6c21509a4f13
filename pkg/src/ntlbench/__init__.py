"""Non-transferable learning: training, attacks and benchmark reporting."""
from .core import (DomainPair, LabeledDataset, Metrics, ModelBundle, PairSplits, RunConfig, SplitTriple,
                   build_model, evaluate_accuracy, overall_score)

__version__ = "0.1.0"
