"""Cross-window feature distillation for CT volume classification."""

from .config import ExperimentConfig, derive_seed
from .ensemble import EnsemblePipeline, MetaLearner, build_pipelines, collect_probabilities, fit_meta
from .exceptions import LeakageError, StageFailure, ValidationError, XWDError
from .ingestion import PhantomSpec, SamplingPlan, generate_phantoms, load_series, preprocess_volume, split_patients, to_hu
from .model import EncoderConfig, build_encoder, forward_features, load_checkpoint, predict_proba, save_checkpoint
from .orchestrator import Experiment
from .partitions import TestPartition, TrainPartition, ValidationPartition
from .training import DistilledWindowClassifier, TrainConfig, WindowClassifier, select_teacher, train_distilled, train_supervised
from .windowing import WindowNormalizer, WindowSet, WindowSpec, apply_window, default_window_set

__version__ = "0.1.0"
