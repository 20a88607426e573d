"""Groupwise one-shot deformable registration for 4D volumetric image groups.

Register all phases of a 4D acquisition simultaneously into an implicit
mean template by optimizing a convolutional displacement model from
scratch on the single case at hand, then derive any phase-to-phase field
by inversion and composition.

Typical flow::

    group, landmark_sets = dataio.load_case(meta)
    group = dataio.normalize_group(group)
    group, landmark_sets, offset = dataio.crop_to_landmarks(group, landmark_sets)
    fields, report = register(group, RegConfig(net=NetConfig(group.num_phases)))
    stats = evaluate_registration(fields, lm_src, lm_tgt, 0, 5, group.grid.spacing)
"""

from .core import (
    DisplacementField,
    FieldSet,
    Grid3,
    ImageGroup,
    LandmarkSet,
    ONE_BASED,
    Volume,
    ZERO_BASED,
    convert_landmarks,
    make_volume,
)
from .fields import (
    InversionParams,
    InversionResult,
    compose,
    invert_field,
    pairwise_field,
    rescale_field,
    transport_landmarks,
    warp,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    cyclic_loss,
    local_ncc,
    similarity_loss,
    smoothness_loss,
    total_loss,
)
from .network import (
    DisplacementNet,
    NetConfig,
    NonFiniteError,
    build_network,
    load_weights,
    predict_fields,
    save_weights,
)
from .optimize import (
    RegConfig,
    RegReport,
    implicit_template,
    load_checkpoint,
    register,
    resume,
    should_stop,
    write_trace,
)
from .dataio import (
    CaseMeta,
    PhantomSpec,
    crop_to_landmarks,
    load_case,
    load_field,
    load_fieldset,
    load_manifest,
    make_phantom,
    normalize,
    normalize_group,
    save_field,
    save_fieldset,
)
from .evaluate import (
    TREStats,
    evaluate_registration,
    export_difference_maps,
    repeatability,
    stats_from_errors,
    tre,
)

__version__ = "0.1.0"
