"""Guided depth-map super-resolution with coupled co-sparse analysis operators.

The package learns a pair of analysis operators from registered
intensity/depth image pairs and uses them to super-resolve, denoise, and
inpaint low-resolution depth maps guided by a high-resolution intensity
image of the same scene.
"""

from .imaging import (
    DepthMap,
    GrayImage,
    ImageFormatError,
    bad_pixel_rate,
    gaussian_downsample,
    load_depth,
    load_image,
    rmse_8bit,
    save_image,
    upsample_baseline,
)
from .learning import (
    LearnConfig,
    TrainingSet,
    coupled_sparsity,
    extract_training_pairs,
    learn_operator_pair,
    learning_gradient,
    learning_objective,
    objective_G,
    penalty_h,
    penalty_r,
)
from .manifold import (
    CgConfig,
    ObliquePoint,
    OptimizationError,
    TangentVector,
    cg_minimize,
    cg_minimize_euclidean,
    project_tangent,
    retract,
    transport,
)
from .operators import (
    AnalysisOperator,
    CoSupport,
    CoefficientStack,
    OperatorFormatError,
    OperatorPair,
    analyze_patch,
    apply_global,
    apply_global_adjoint,
    cosupport,
    cosupport_dependency,
    load_pair,
    save_pair,
)
from .reconstruction import (
    FidelityTerm,
    MeasurementModel,
    ReconstructionTrace,
    SolveConfig,
    apply_measurement,
    apply_measurement_adjoint,
    initialize_hr,
    intensity_code,
    objective_and_gradient,
    super_resolve,
)

__version__ = "0.1.0"
