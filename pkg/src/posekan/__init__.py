"""Graph Kolmogorov-Arnold networks with two-hop spectral propagation for
lifting 2D keypoints to 3D human poses, in plain numpy with hand-written
gradients."""

from .errors import *  # noqa: F401,F403
from .graph import (
    SkeletonGraph,
    PropagationMatrix,
    SpectralFilter,
    build_graph,
    propagation_matrix,
    apply_propagation,
    spectral_response,
    fixed_point_step,
    verify_filter_identities,
    load_skeleton,
    parse_skeleton,
    format_skeleton,
)
from .kan import SplineGrid, KanLayer, bspline_basis, silu, kan_init, edge_activation
from .nn import LayerNorm, GRN, gelu, dropout_forward, dropout_backward
from .gradcheck import grad_check
from .model import ModelConfig, PoseKanModel, build_model, closed_form_parameter_count
from .training import (
    TrainConfig,
    TrainState,
    elastic_loss,
    amsgrad_step,
    lr_schedule,
    train,
    evaluate,
)
from .data import (
    Dataset,
    PoseSample,
    load_dataset,
    save_dataset,
    make_synthetic_task,
    normalize_2d,
    denormalize_2d,
)
from .metrics import mpjpe, pa_mpjpe, pck_auc, procrustes_align
from .checkpoint import save_checkpoint, load_checkpoint
from .config import RunConfig

__version__ = "0.1.0"
