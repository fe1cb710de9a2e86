"""Deterministic subcortical label fusion, landmark-driven refinement,
shape modeling and evaluation for the 26/12-label protocol."""

__version__ = "0.1.0"

from .labels import (
    BILATERAL_FUSED,
    FINE_LABELS,
    FUSE_LUT,
    FUSED_LABELS,
    LANDMARK_PAIRS,
    LANDMARKS,
    MIDLINE_FUSED,
    MIDSAGITTAL_IDS,
    N_LANDMARKS,
    LabelError,
    LandmarkSet,
    fuse_labels,
    parse_landmarks,
    validate_labels,
    validate_landmarks,
    write_landmarks,
)
from .metrics import (
    DEFAULT_BOUNDARIES,
    BoundarySide,
    BoundarySpec,
    MetricError,
    MetricReport,
    MetricRow,
    MetricUndefinedError,
    PairedSampleTable,
    benjamini_hochberg,
    dice,
    evaluate_pair,
    extract_protocol_surface,
    extract_separation_line,
    line_metrics,
    pasd,
    wilcoxon_fdr,
    wilcoxon_signed_rank,
)
from .nifti import (
    NiftiError,
    NiftiFormatError,
    OrientationError,
    Volume,
    read_volume,
    reorient_to_canonical,
    round_half_away,
    voxel_to_world,
    world_to_voxel,
    write_volume,
    zscore_normalize,
)
from .phantom import (
    DEGRADE_MODES,
    PhantomError,
    PhantomSpec,
    degrade_phantom,
    generate_phantom,
)
from .refine import (
    Plane,
    RefinementConfig,
    RuleGeometryError,
    apply_coronal_extents,
    build_midsagittal_plane,
    coronal_slice_index,
    refine_full,
    separate_nacc_putamen,
    split_hemispheres,
    split_lv_ih,
    split_vdc,
)
from .shape import (
    CHI3_Q95,
    CONFIG_DIM,
    PATCH_SIDE,
    DisplacementPrediction,
    NoisyOraclePredictor,
    OraclePredictor,
    PatchSpec,
    ShapeModel,
    ShapeModelError,
    ZeroPredictor,
    config_from_landmarks,
    derive_sigma,
    fit_shape_model,
    iterate_fit,
    landmark_error,
    landmarks_from_config,
    load_model,
    project,
    reconstruct,
    sample_patch_centers,
    save_model,
)

__all__ = [name for name in dir() if not name.startswith("_")]
