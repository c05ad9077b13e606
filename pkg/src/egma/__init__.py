"""Eye-gaze guided image-text alignment: gaze preprocessing, losses, toy encoders, training, evaluation."""
from .contrastive import EmbeddingBundle, clip_loss, egf_loss, fine_instance_similarity, mlce_loss
from .errors import ConfigError, DataError, EgmaError, NumericError
from .heatmap import GazeMatrices, PatchGrid, render_heatmap, session_gaze_matrices
from .mapping import MappingConfig, alignment_weights, cross_map, egm_loss, total_loss
from .session import FixationEvent, GazeSession, TimedWord, parse_session
from .trainer import TrainConfig, run_training

__version__ = "0.1.0"
