"""Few-shot image classification with an auxiliary class-level description decoder."""

from .backbone import Backbone, BackboneConfig, PretrainSchedule
from .data import (Episode, LabeledImageDataset, Vocabulary, build_vocabulary, sample_episode, tokenize,
                   tokenize_descriptions)
from .errors import ConfigurationError, DivergenceError, EpisodeError, ShapeError
from .language import DecoderConfig, build_decoder_stack, language_loss
from .proto import classify, compute_prototypes, episodic_loss
from .training import MetricsReport, TrainConfig, evaluate, train_episodic
from .worlds import ConceptSpec, generate_benchmark, generate_class

__version__ = "0.1.0"
