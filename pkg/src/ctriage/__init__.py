"""Head-CT triage on synthetic phantoms.

A from-scratch convolutional ensemble scores every trait in a clinical
taxonomy; studies confidently free of significant findings are reported,
the rest are referred to a reader.
"""

from .aggregate import REFER, REPORT, Ensemble, SelectiveReporter, StudyVerdict
from .config import RunConfig, load_config
from .metrics import auc_score, bootstrap_ci, csmr, literary_rate, risk_coverage, roc
from .net import Network, NetworkSpec, SliceClassifier, TrainConfig
from .phantom import PhantomSpec, generate_corpus, generate_study
from .taxonomy import Taxonomy, Tier, Trait, default_taxonomy, effective_target

__version__ = "0.1.0"

__all__ = [
    "REFER", "REPORT", "Ensemble", "Network", "NetworkSpec", "PhantomSpec", "RunConfig",
    "SelectiveReporter", "SliceClassifier", "StudyVerdict", "Taxonomy", "Tier", "TrainConfig",
    "Trait", "auc_score", "bootstrap_ci", "csmr", "default_taxonomy", "effective_target",
    "generate_corpus", "generate_study", "literary_rate", "load_config", "risk_coverage", "roc",
]
