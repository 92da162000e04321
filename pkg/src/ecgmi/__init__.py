"""MI detection on PTB ECG records with a from-scratch numpy 1-D conv net."""

__version__ = "0.1.0"

from .dataset import SignalStore, Split, SplitSpec, make_split  # noqa: E402
from .ingest import DatasetIndex, build_index, read_record  # noqa: E402
from .trainer import Metrics, TrainConfig, TrialResult, evaluate, train_trial  # noqa: E402

__all__ = ["DatasetIndex", "Metrics", "SignalStore", "Split", "SplitSpec", "TrainConfig", "TrialResult",
           "build_index", "evaluate", "make_split", "read_record", "train_trial"]
