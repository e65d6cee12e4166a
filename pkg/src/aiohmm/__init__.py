"""Autoregressive input-output HMMs for anticipating driving maneuvers.

Per-class AIO-HMMs are trained with generalized EM on windows of inside
(head motion) and outside (lanes, road, speed) context, then scored on a
sliding window to predict the upcoming maneuver.
"""
from .anticipation import (THRESHOLD_GRID, Anticipator, MetricCounts, PredictionEvent, ProtocolConfig,
                           confusion_matrix, gate, score, stream_anticipate, sweep)
from .errors import AioHmmError, InternalError, InvalidArgumentError, NumericalError, ParseError, SchemaError
from .features import Annotation, FrameRecord, RawTrace, TraceFeaturizer, featurize_trace
from .inference import (PosteriorStats, anticipate_posteriors, brute_force_loglik, forward_backward,
                        sequence_loglik)
from .learning import Ablation, EmConfig, FitReport, e_step, fit_all, fit_em, init_params, m_step, q_value
from .model import (CLASSES, MANEUVERS, STRAIGHT, FeatureSequence, ManeuverClass, ManeuverModelSet,
                    ModelParams, OutsideFeature, StateParams, sample_sequence, validate)
from .synth import Episode, ScenarioConfig, generate_episode

__version__ = "0.1.0"
