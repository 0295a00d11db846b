"""Camera-to-mocap extrinsic calibration with independent fiducial verification."""

from .camera import CameraModel, PixelPoint, project, project_jacobians, unproject
from .chain import (
    BoardGeometry,
    CalibrationDataset,
    ChainEstimate,
    MocapFrame,
    Observation,
    RegularizationConfig,
    board_rmse,
    make_grid_board,
    objective_2d,
    objective_3d,
    predict_pixel,
    residual,
)
from .errors import CalibrationError
from .geometry import (
    RigidTransform,
    RotationCandidateSet,
    Twist,
    procrustes_fit,
    rotation_frobenius_distance,
    sample_candidate_rotations,
    se3_exp,
    se3_log,
)
from .solver import (
    CalibrationResult,
    PnpReferences,
    SolverOptions,
    build_references,
    calibrate,
    calibrate_fixed_x,
    lm_minimize,
    pnp_board_pose,
)
from .synth import SceneSpec, SyntheticScene, generate_lollypop, generate_scene, perturb_estimate
# The verify() entry point stays on the submodule (mocapcal.verify.verify) so
# the package attribute `mocapcal.verify` remains the module itself.
from .verify import (
    ErrorHeatmap,
    LollypopFrame,
    VerificationReport,
    aruco_center,
    build_heatmap,
    drift_series,
    frame_errors,
    homography_from_quad,
    project_mocap_center,
)

__version__ = "0.1.0"
