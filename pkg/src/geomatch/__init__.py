"""geomatch: trainable geometric matching on synthetic homography data.

Core pieces: parametric affine/homography/TPS transforms, a differentiable
bilinear warp, cosine and Pearson correlation volumes, Gaussian-weighted grid
losses, a small trainable correlation-to-parameters pipeline, synthetic data
generation, and PCK evaluation with an ablation harness.
"""

__version__ = "0.1.0"

from .errors import (
    DataError,
    DegenerateCornersError,
    DegenerateDescriptorError,
    DegenerateObjectiveError,
    GenerationError,
    GeomatchError,
    H9NearZeroError,
    NumericalError,
    ProjectiveSingularityError,
    TrainingDivergedError,
)
from .geometry import (
    Grid,
    TransformKind,
    TransformParams,
    TpsBasis,
    compose_apply,
    compose_params,
    fit_homography_dlt,
    invert_params,
    make_grid,
    map_points,
    map_points_jacobian,
    normalize_homography,
    preimage_points,
)
from .loss import (
    GaussianWeightConfig,
    gaussian_weights,
    grid_loss,
    param_mse_loss,
    weighted_grid_loss,
)
from .matching import (
    CorrelationMap,
    FeatureMap,
    cosine_correlation,
    load_feature_map,
    pearson_correlation,
    save_feature_map,
)
from .model import (
    ExtractorSpec,
    ModelCheckpoint,
    RegressorSpec,
    TrainConfig,
    extract_features,
    forward_pipeline,
    load_checkpoint,
    make_oracle_checkpoint,
    make_residual_samples,
    regress,
    save_checkpoint,
    train,
    two_stage_match,
)
from .evaluation import (
    AblationReport,
    PCKResult,
    evaluate_grid_loss,
    evaluate_model,
    pck,
    run_ablation,
)
from .synth import (
    GenConfig,
    HomographySample,
    gen_toy_image,
    generate_corpus,
    generate_dataset,
    make_sample,
    perturb_corners,
    read_dataset,
    write_dataset,
)
from .warp import Image, load_image, sample_bilinear, save_image, warp_image
