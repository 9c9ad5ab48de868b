"""Flatness-aware backbone training, fusion, selection and adaptation for
few-shot classification, with Hessian flatness diagnostics and
generalisation-bound term reports."""

from .bank import (
    BackboneBank,
    Provenance,
    as_plain_backbone,
    finetune,
    merge_lora,
    read_checkpoint,
    write_checkpoint,
)
from .data import (
    Domain,
    Episode,
    EpisodeProtocol,
    GaussianMixtureSpec,
    SyntheticSpec,
    check_disjoint_classes,
    gen_synthetic_domains,
    load_domain,
    load_idx,
    pool_domains,
    sample_episode,
    save_domain,
    stratified_split,
    with_label_noise,
    write_idx,
)
from .cli import cli_main
from .errors import FlatshotError
from .evaluate import EvalReport, compare_reports, emit_report, evaluate
from .flatness import (
    BoundReport,
    FlatnessReport,
    bound_report,
    flatness_report,
    hessian_trace,
    hvp,
    landscape_slice,
    orthonormal_directions,
    top_eigenvalue,
    tv_divergence,
)
from .model import (
    AdapterSpec,
    Batch,
    Model,
    attach_adapters,
    forward,
    forward_backward,
    gradient_check,
    init_model,
    param_count,
    param_vector,
    replace_head,
    set_gates,
    unflatten,
)
from .selection import (
    AdaptConfig,
    SelectionReport,
    adapt_task,
    extract_features,
    ncc_classify,
    parc_score,
    select_backbone,
)
from .stats import TTestResult, ci95, paired_ttest
from .training import (
    TrainConfig,
    TrainHistory,
    cosine_lr,
    erm_objective,
    first_order_sam,
    sam_gradient,
    sam_perturbation,
    sgd_step,
    train,
)

__version__ = "0.1.0"
