"""Projector intrinsic calibration from pinhole-array structured light.

The package simulates a desk-scale optical bench (finite-aperture thin-lens
projector, pinhole-array masks, a flatbed-scanner plane), decodes gray-code
scans into projector/scanner correspondences, extracts per-pinhole chief-ray
pixels by back-projecting blobs onto the panel, and estimates the projector
intrinsics with a planar closed form, joint LM refinement, and iterative
outlier exclusion.
"""

from .blobs import (
    Blob,
    EllipseParams,
    PinholeGridAssignment,
    cluster_masks,
    fit_ellipse,
    recognize_grid,
    segment_blobs,
)
from .calibrate import (
    CalibrationResult,
    CorrespondenceSet,
    PlanarView,
    PoseEstimate,
    ProjectorCalibrator,
    build_views,
    evaluate_projection,
    refine_lm,
    reprojection_errors,
    robust_calibrate,
    solve_pnp,
    zhang_closed_form,
)
from .chief import (
    BackprojectedBlob,
    ChiefRaySample,
    CircleFit,
    PinholeRef,
    backproject,
    extract_chief,
    fit_circle,
    naive_center,
)
from .errors import (
    BehindProjectorError,
    BenchValidationError,
    ChiefRayError,
    ClosedFormFailedError,
    DegenerateCircleError,
    DegenerateHomographyError,
    EmptyFieldError,
    GridNotFoundError,
    InsufficientViewError,
    LMFailedError,
    MissingCodeError,
    NotAnEllipseError,
    OverClusteredError,
    OverlappingBlobsError,
    PipelineStageError,
    PnPDegenerateError,
    StackMismatchError,
)
from .geometry import (
    Homography,
    Intrinsics,
    PlaneFrame,
    RasterPlane,
    RigidPose,
    estimate_homography,
    project,
    unproject_ray,
)
from .graycode import (
    DecodedMap,
    PatternStack,
    decode_stack,
    generate_patterns,
    gray_decode,
    gray_encode,
    inverse_lookup,
)
from .simulate import (
    BenchConfig,
    GroundTruth,
    PinholeMask,
    ProjectorModel,
    ScanImage,
    Simulator,
    SynthDataset,
    ground_truth_intrinsics,
    render_scan,
    synth_dataset,
    trace_ray,
)

__version__ = "0.1.0"
