"""Multi-camera traffic light fusion and tracking.

Associates 2D detections with HD-map light positions via gated optimal
assignment, manages per-light track lifecycles across cameras and time,
refines light-state estimates with per-type hidden Markov models, and
detects duty-cycled flashing states. Ships with a deterministic scenario
simulator and an evaluation harness for ablation studies on synthetic
streams.
"""

from .association import Assignment, back_project, build_cost_matrix, solve_assignment
from .detection import (
    CLASS_ORDER,
    ConfusionModel,
    Detection2D,
    TlClass,
    TlType,
    class_to_type,
    confusion_from_counts,
)
from .geometry import (
    CameraIntrinsics,
    CameraModel,
    PixelBox,
    PoseBuffer,
    RigidTransform,
    TimedPose,
    camera_from_utm,
    interpolate_pose,
    project_box,
    project_point,
)
from .harness import AblationMode, EvalReport, PipelineConfig, evaluate, run_pipeline
from .hdmap import HdMap, MapTrafficLight, SpatialIndex, build_index, load_map, query_visible
from .simulator import LightProgram, NoiseModel, Scenario, generate, validate_program
from .statefilter import (
    BeliefState,
    FlashingConfig,
    Hmm,
    build_evidence,
    default_hmm,
    detect_flashing,
    forward_update,
    map_state,
)
from .tracker import Observation, Track, TrackerConfig, TrackStore

__version__ = "0.1.0"
