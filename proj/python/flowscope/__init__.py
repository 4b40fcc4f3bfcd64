"""Attention-flow analysis of a miniature multimodal decoder."""

from ._core import (
    ContractError,
    HookPoint,
    Input,
    IoError,
    Model,
    ModelConfig,
    Task,
    argtop,
    generate_task,
    influence_rates,
    plant_cliff,
    run_cli,
    smooth_cam,
    sweep_cliff,
    task_model_config,
    text_only_logits,
    train,
    truncate,
)

__all__ = [
    "ContractError",
    "HookPoint",
    "Input",
    "IoError",
    "Model",
    "ModelConfig",
    "Task",
    "argtop",
    "generate_task",
    "influence_rates",
    "plant_cliff",
    "run_cli",
    "smooth_cam",
    "sweep_cliff",
    "task_model_config",
    "text_only_logits",
    "train",
    "truncate",
]
