"""Scene coordinate regression from sparse descriptors, with a synthetic harness."""
from .config import Settings, load_preset, load_settings
from .estimator import D2SRegressor
from .exceptions import *  # noqa: F401,F403
from .frames import DescriptorSet, Frame, LabeledFrame, SceneCoordinateSet
from .geometry import CameraPose, Intrinsics, PoseError, pose_error
from .network import Architecture, ModelParams, forward, reliability
from .pose_solver import RansacConfig, p3p, ransac_pnp, refine_lm
from .pseudo_label import PseudoLabeler, pseudo_label
from .synth import RenderConfig, TrajectorySpec, evaluate, generate_scene, make_dataset
from .training import TrainConfig, train, update_with_pseudo

__version__ = "0.1.0"
