"""Transformer-based predictive business process monitoring."""
from .estimator import ProcessTransformerClassifier, ProcessTransformerRegressor, make_estimator
from .evaluation import EvalReport, accuracy, evaluate_per_prefix, mae, weighted_f_score
from .eventlog import (ActivityVocabulary, ColumnMapping, Event, EventLog, Trace,
                       build_vocabulary, chronological_split, parse_csv)
from .features import (Dataset, FeatureScaler, PrefixEncoder, PrefixSample, build_dataset,
                       fit_scaler, generate_prefix_samples, temporal_features)
from .model import ModelConfig, load_params, save_params
from .training import TrainConfig, train

__version__ = "0.1.0"
