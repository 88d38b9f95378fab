"""Water-mist point-cloud fusion and LiDAR detection-degradation toolkit."""

from mistfuse.cloudcore import (
    BoundingBox3D,
    Point,
    PointCloud,
    RigidTransform,
    chamfer,
    crop_to_box,
    hausdorff,
    read_frame,
    read_labels,
    transform,
    write_frame,
    write_labels,
)
from mistfuse.rangesim import (
    LaserModel,
    RangeImage,
    backproject,
    fit_laser_model,
    load_model,
    project,
    roundtrip_loss,
    save_model,
    scan_unfold,
)
from mistfuse.objectgen import (
    GeneratorLatents,
    PlumeParams,
    SequenceSample,
    default_params,
    load_rolid,
    realism_report,
    sample_sequence,
)
from mistfuse.fusion import (
    MODES,
    AnchorSet,
    FusionConfig,
    InfeasibleModeError,
    density_gate,
    feasible_modes,
    fuse,
    fuse_frame,
    load_config,
    place_object,
    rotate_spray,
    save_config,
    select_anchor,
)
from mistfuse.evalharness import (
    AttackResult,
    Detection,
    DetectionSet,
    SweepCell,
    SweepGrid,
    SweepResult,
    attack_success,
    file_detector,
    iou3d,
    mock_detector,
    occlusion_ratio,
    read_detections,
    sweep,
    write_detections,
)

__version__ = "0.1.0"
