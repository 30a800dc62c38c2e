"""Residual networks as forward-Euler ODE discretizations: a CPU
training engine with multi-level depth schedules and lesion analyses.

Submodules are loaded lazily so the CLI can pin BLAS thread counts
before numpy's first import.
"""
import importlib

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "ops", "optim", "model", "checkpoint", "multilevel",
               "lesion", "data", "config", "cli", "errors", "csvio")

_EXPORTS = {
    "Tensor": "tensor", "Parameter": "tensor", "Tape": "tensor",
    "conv2d": "ops", "batchnorm": "ops", "relu": "ops", "add": "ops",
    "scale": "ops", "global_avg_pool": "ops", "linear": "ops",
    "softmax_cross_entropy": "ops", "set_conv_backend": "ops",
    "sgd_step": "optim", "grad_check": "optim",
    "ResNetSpec": "model", "ResNetModel": "model", "build_model": "model",
    "block_forward": "model", "forward": "model", "forward_collect": "model",
    "count_params": "model", "param_shapes": "model", "evaluate": "model",
    "save_checkpoint": "checkpoint", "load_checkpoint": "checkpoint",
    "CycleSchedule": "multilevel", "LRState": "multilevel",
    "cosine_lr": "multilevel", "theoretical_time_saved": "multilevel",
    "plan_schedule": "multilevel", "interpolate": "multilevel",
    "train": "multilevel", "baseline_train": "multilevel",
    "OptimizerSettings": "multilevel",
    "profile_norms": "lesion", "remove_block": "lesion",
    "shuffle_blocks": "lesion", "lesion_sweep": "lesion",
    "f_norm_curves": "lesion", "curve_correlation": "lesion",
    "Dataset": "data", "AugmentConfig": "data", "DataFeed": "data",
    "load_cifar10": "data", "load_mnist": "data", "synthesize": "data",
    "write_cifar10": "data", "augment": "data", "batches": "data",
    "Prefetcher": "data",
    "RunConfig": "config", "load_config": "config", "config_hash": "config",
    "OdenetError": "errors", "ShapeError": "errors", "ConfigError": "errors",
    "DataError": "errors", "DivergenceError": "errors",
}

__all__ = sorted(_EXPORTS) + list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
