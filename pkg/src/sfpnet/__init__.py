"""Sparse focal point modulation for LiDAR semantic segmentation."""
from . import _backend
from .autograd import ParamStore, Tape, adamw_step, backward, finite_diff_check, poly_lr
from .errors import (ConfigError, ConsistencyError, ContractError, FormatError, InputError,
                     OracleError, RangeError, SFPError, TrainingError)
from .network import NetworkConfig, build_network, network_forward, predict_labels, train_step
from .ops import ConvKernel, focal_loss, strided_downsample, submconv_backward, \
    submconv_forward, upsample_inverse
from .sfpm import ModulatorConfig, ModulatorParams, sfp_block_forward, sfpm_forward
from .sparse import Rulebook, SparseTensor, VoxelMap, build_rulebook, devoxelize, voxelize

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConsistencyError", "ContractError", "ConvKernel", "FormatError",
    "InputError", "ModulatorConfig", "ModulatorParams", "NetworkConfig", "OracleError",
    "ParamStore", "RangeError", "Rulebook", "SFPError", "SparseTensor", "Tape",
    "TrainingError", "VoxelMap", "adamw_step", "backward", "build_network", "build_rulebook",
    "devoxelize", "finite_diff_check", "focal_loss", "network_forward", "poly_lr",
    "predict_labels", "sfp_block_forward", "sfpm_forward", "strided_downsample",
    "submconv_backward", "submconv_forward", "train_step", "upsample_inverse", "voxelize",
]
