"""Temporal feature alignment on the Poincare ball.

A numerical library and experiment CLI: hyperbolic geometry kernel with two
parallel-transport variants, gated Euclidean context-difference fusion,
cross-space compression, contrastive / matching / class-weighted objectives,
a hand-written reverse-mode kernel with finite-difference verification, a
deterministic synthetic-data generator, and a training runner.
"""

from .config import Flags, RunConfig, SchedulerConfig, SynthSection, config_from_dict, load_config, save_config
from .diffcore import AdamW, Param, adamw_step, grad_check, load_checkpoint, primitive, save_checkpoint
from .errors import ContractError, DivergenceError, TransportSingularityError
from .fusion import (
    FeatureBundle,
    FusionOutput,
    MedMamParams,
    cross_space_compress,
    euclid_fuse,
    init_medmam_params,
    manifold_diff,
    medmam_forward,
)
from .manifold import (
    BallPoint,
    Curvature,
    TangentVec,
    conformal_factor,
    exp_map,
    geodesic_distance,
    log_map,
    mobius_add,
    parallel_transport,
    project,
    transport_audit,
)
from .metrics import accuracy, confusion_matrix, macro_f1, per_class_stats, weighted_f1
from .model import ModelParams, build_params, forward_batch, predict_logits
from .runner import ABLATION_ARMS, RunReport, ablate, evaluate, geometry_audit, gradient_suite, train
from .semantics import (
    HEALTHY_TEMPLATE,
    LABELS,
    HeadParams,
    ProgressionText,
    class_weights,
    cosine_matrix,
    embed_text,
    init_head_params,
    itc_loss,
    itm_loss,
    progression_head,
    raw_text_embedding,
    render_template,
    total_loss,
    weighted_ce,
)
from .synth import SynthConfig, SynthSample, generate, load_jsonl, save_jsonl, split

__version__ = "0.1.0"
