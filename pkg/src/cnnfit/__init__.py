"""Compile CNN models from ONNX into configurations for pipelined FPGA kernels."""

__version__ = "0.1.0"

from .cost import CostModel, HardwareOption, HardwareTarget, ResourceEstimate, get_target, load_catalog
from .dse import AgentConfig, Thresholds, brute_force, legal_space, rl_explore
from .emit import DesignBundle, emit, load, make_bundle
from .ir import LayerDescriptor, PipelineStage, dump_ir, fuse_stages, lower
from .onnx_wire import RawGraph, decode_model, encode_model, load_model
from .quant import QuantSpec, QuantTable, QuantizedTensor, quantize_tensor
from .sim import lane_equivalence_check, run_network, run_stage

__all__ = [
    "AgentConfig",
    "CostModel",
    "DesignBundle",
    "HardwareOption",
    "HardwareTarget",
    "LayerDescriptor",
    "PipelineStage",
    "QuantSpec",
    "QuantTable",
    "QuantizedTensor",
    "RawGraph",
    "ResourceEstimate",
    "Thresholds",
    "brute_force",
    "decode_model",
    "dump_ir",
    "emit",
    "encode_model",
    "fuse_stages",
    "get_target",
    "lane_equivalence_check",
    "legal_space",
    "load",
    "load_catalog",
    "load_model",
    "lower",
    "make_bundle",
    "quantize_tensor",
    "rl_explore",
    "run_network",
    "run_stage",
]
