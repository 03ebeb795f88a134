"""Desk-scale auto-tuning of convolution kernel templates with a meta-learned
graph cost model, searched by batch Bayesian optimization or simulated
annealing against a deterministic synthetic performance oracle."""

from .errors import ConfigError, DomainError, NumericError
from .kernels import (
    KernelSpec,
    KnobConfig,
    KnobDef,
    KnobSpace,
    build_knob_space,
    config_index,
    index_config,
    lower_to_loop_nest,
)
from .graphs import (
    CodeGraph,
    SuperGraphTemplate,
    ast_to_graph,
    augment_to_super,
    build_super_template,
    config_graph,
    graph_from_text,
    graph_to_text,
)
from .model import ModelState, forward, init_model, load_model, predict_gflops, save_model
from .meta import MetaConfig, fine_tune, meta_train, pretrain
from .oracle import BUILTIN_PROFILES, Measurement, PlatformProfile, get_profile, measure
from .baselines import GbtHyperParams, GbtModel, gbt_fit, gbt_predict
from .search import (
    SaSchedule,
    TuneConfig,
    TuningRecord,
    bo_propose_batch,
    bo_search,
    sa_explore,
    sa_search,
    sa_propose,
    tune,
)
from .harness import (
    Dataset,
    DatasetParams,
    ExperimentPlan,
    compute_metrics,
    default_plan,
    gen_dataset,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_PROFILES",
    "CodeGraph",
    "ConfigError",
    "Dataset",
    "DatasetParams",
    "DomainError",
    "ExperimentPlan",
    "GbtHyperParams",
    "GbtModel",
    "KernelSpec",
    "KnobConfig",
    "KnobDef",
    "KnobSpace",
    "Measurement",
    "MetaConfig",
    "ModelState",
    "NumericError",
    "PlatformProfile",
    "SaSchedule",
    "SuperGraphTemplate",
    "TuneConfig",
    "TuningRecord",
    "ast_to_graph",
    "augment_to_super",
    "bo_propose_batch",
    "build_knob_space",
    "build_super_template",
    "compute_metrics",
    "config_graph",
    "config_index",
    "default_plan",
    "fine_tune",
    "forward",
    "gbt_fit",
    "gbt_predict",
    "gen_dataset",
    "get_profile",
    "graph_from_text",
    "graph_to_text",
    "index_config",
    "init_model",
    "load_model",
    "lower_to_loop_nest",
    "measure",
    "meta_train",
    "predict_gflops",
    "pretrain",
    "run_experiment",
    "bo_search",
    "sa_explore",
    "sa_search",
    "sa_propose",
    "save_model",
    "tune",
]
