"""Heterogeneous collaborative perception through a negotiated common representation,
at desk scale on synthetic bird's-eye-view scenes."""
from .agents import AgentModel, AgentSpec, Detections, FeatureMap, TrainingDiverged
from .bridge import Receiver, Sender, StandardRepSpec
from .checkpoint import FreezeManifest, FreezeReport, FreezeViolation, verify_frozen
from .config import ExperimentConfig, desk_config, load_config
from .losses import LossWeights
from .metrics import detection_ap, kl_domain_gap
from .negotiator import Negotiator, PyramidConfig
from .scenegen import GridSpec, ModalitySpec, Pose, Scene

__version__ = "0.1.0"
