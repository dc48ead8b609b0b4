from cfpoison.cli import __version__
from cfpoison.classifiers import CLASSIFIERS, TrainedModel, fit
from cfpoison.defense import DEFENSES
from cfpoison.models import (
    CommandResult,
    Counterfactual,
    Dataset,
    ExperimentConfig,
    ExperimentReport,
    PoisonSet,
)
from cfpoison.recourse import GENERATORS

__all__ = [
    "__version__",
    "CLASSIFIERS",
    "CommandResult",
    "Counterfactual",
    "DEFENSES",
    "Dataset",
    "ExperimentConfig",
    "ExperimentReport",
    "GENERATORS",
    "PoisonSet",
    "TrainedModel",
    "fit",
]
