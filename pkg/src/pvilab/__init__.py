"""pvilab: plug-in visual injection for frozen flow-matching policies.

A self-contained lab for studying how to graft new visual conditioning onto a
frozen diffusion-transformer action policy: a tape-based autodiff core, a
small DiT trunk, six injection variants with explicit freeze plans, flow-
matching training and Euler sampling, deterministic synthetic tasks with
known information-theoretic ceilings, and a reproducible experiment harness.
"""
from .tensor import Tensor, ShapeError, no_grad, gradcheck, OPS, set_debug_checks
from .params import (ParamStore, CheckpointError, OptimizerError, optimizer_step,
                     save_checkpoint, load_checkpoint, file_sha256)
from .model import DiTConfig, ConditioningBundle, ActionChunk
from .injection import (VARIANTS, PolicyModel, build_policy, policy_from_store,
                        freeze_plan, param_group, projector_width, needs_aux,
                        forward_velocity, pvi_forward, concat_forward, controlnet_forward,
                        referencenet_forward, controlvla_forward)
from .flow import FlowBatch, make_flow_batch, interpolate, interpolate_batch, fm_loss, \
    euler_sample, euler_sample_batch
from .encoders import (ENCODER_KINDS, EncoderSpec, ObservationWindow, build_encoder,
                       VlmProxyEncoder, StaticEncoder, TemporalEncoder, CombinedEncoder)
from .taskbench import (FAMILIES, TaskSpec, Episode, Dataset, gen_episode, make_dataset,
                        eval_episodes, success, ambiguity_bound, closed_form_intercept_bound,
                        line_oracle, multiphase_oracle, save_dataset, load_dataset)
from .config import RunConfig, ConfigError, load_config, dump_config
from .harness import (ContractViolation, pretrain, train, evaluate, compare, ablate,
                      param_report, report, wilson_interval, load_run, derived_seed)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "no_grad", "gradcheck", "OPS", "set_debug_checks",
    "ParamStore", "CheckpointError", "OptimizerError", "optimizer_step",
    "save_checkpoint", "load_checkpoint", "file_sha256",
    "DiTConfig", "ConditioningBundle", "ActionChunk",
    "VARIANTS", "PolicyModel", "build_policy", "policy_from_store", "freeze_plan",
    "param_group", "projector_width", "needs_aux", "forward_velocity",
    "pvi_forward", "concat_forward", "controlnet_forward", "referencenet_forward",
    "controlvla_forward",
    "FlowBatch", "make_flow_batch", "interpolate", "interpolate_batch", "fm_loss",
    "euler_sample", "euler_sample_batch",
    "ENCODER_KINDS", "EncoderSpec", "ObservationWindow", "build_encoder",
    "VlmProxyEncoder", "StaticEncoder", "TemporalEncoder", "CombinedEncoder",
    "FAMILIES", "TaskSpec", "Episode", "Dataset", "gen_episode", "make_dataset",
    "eval_episodes", "success", "ambiguity_bound", "closed_form_intercept_bound",
    "line_oracle", "multiphase_oracle", "save_dataset", "load_dataset",
    "RunConfig", "ConfigError", "load_config", "dump_config",
    "ContractViolation", "pretrain", "train", "evaluate", "compare", "ablate",
    "param_report", "report", "wilson_interval", "load_run", "derived_seed",
    "__version__",
]
