"""LiDAR beam-density re-sampling and desk-scale density adaptation."""

from .beam_model import BeamModel, beam_density, cluster_beams, fit_beam_model
from .errors import (
    DegenerateDenominator,
    DegeneratePoint,
    DimensionMismatch,
    EmptyBeam,
    EmptyCloud,
    LengthMismatch,
    MalformedFile,
    RebeamError,
    SchemaViolation,
    SingleBeam,
    TooFewDistinctZeniths,
    ZeroNormFeature,
)
from .geometry import (
    BevBox,
    RangeImage,
    cartesian_to_spherical,
    project_range_image,
    rotated_bev_iou,
    spherical_to_cartesian,
    wrap_angle,
)
from .object_graph import (
    BoxPrediction,
    ConsistencyConfig,
    GraphConfig,
    MatchConfig,
    ObjectGraph,
    build_graph,
    consistency_loss,
    edge_consistency_loss,
    edge_weight,
    glr,
    greedy_iou_match,
    match_nodes,
    node_consistency_loss,
)
from .rbrs import (
    DownsampleConfig,
    RbrsConfig,
    UpsampleConfig,
    apply_rbrs,
    downsample,
    interp_probabilities,
    interpolate_gap,
    mask_probabilities,
    upsample,
)
from .scene_synth import (
    RenderResult,
    SceneSpec,
    ScannerSpec,
    graded_beams,
    render_scene,
    uniform_beams,
)
from .self_train import (
    DtsConfig,
    EmaConfig,
    PseudoLabelConfig,
    ToyDetector,
    TrainReport,
    closed_gap,
    dts_step,
    dts_train,
    ema_update,
    evaluate_mse,
    filter_pseudo_labels,
    pretrain,
    total_loss,
)

__version__ = "0.1.0"
