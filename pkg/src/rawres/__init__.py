"""Residual-block variants for raw-audio (1D) and log-Mel (2D) CNNs."""

from .model import (ArchConfig, Network, build_m34res, build_network, build_slim2d, count_parameters, ledger_for,
                    load_checkpoint, m34res_config, save_checkpoint, slim2d_config)
from .resblocks import BLOCK_KINDS, ResidualBlock, block_param_count, build_block

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BLOCK_KINDS",
    "Network",
    "ResidualBlock",
    "block_param_count",
    "build_block",
    "build_m34res",
    "build_network",
    "build_slim2d",
    "count_parameters",
    "ledger_for",
    "load_checkpoint",
    "m34res_config",
    "save_checkpoint",
    "slim2d_config",
]
