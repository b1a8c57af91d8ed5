"""Self-supervised 6-DOF grasp data generation and single-view grasp planning."""

from .force_closure import MU_LIST, TH_BAD, TH_GOOD, ContactPair, GraspLabel, force_closure_test, friction_sweep_score, label
from .geom_core import CameraIntrinsics, DepthImage, InputError, PointCloud, RigidTransform

__version__ = "0.1.0"

__all__ = [
    "MU_LIST", "TH_BAD", "TH_GOOD", "CameraIntrinsics", "ContactPair", "DepthImage", "GraspLabel",
    "InputError", "PointCloud", "RigidTransform", "force_closure_test", "friction_sweep_score", "label",
]
