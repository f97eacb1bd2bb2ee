"""Differentiable fusion-network search space."""

from .cells import CELL_KINDS, Cell, CellSpec, CellStack, Edge
from .config import (
    DEFAULT_CANDIDATES,
    SEARCHED_IVIF_ENHANCEMENT,
    SEARCHED_IVIF_FUSION,
    SearchSpaceConfig,
    TaskHeadConfig,
    load_space_config,
    parse_space_config,
    parse_task_head,
    synthetic_latency,
)
from .network import (
    FusionNetwork,
    TaskHead,
    architecture_manifest,
    build_fusion_network,
    build_task_head,
    discrete_space_dict,
    discretize,
    init_params,
    mixed_forward,
    run,
    tail_param_count,
)
from .operations import KINDS, OperatorSpec, make_operator, parse_operator
from .params import (
    ArchitectureWeights,
    DiscreteArchitecture,
    LatencyTable,
    NetworkParams,
    derive_architecture,
    discrete_latency,
    latency_regularizer,
)
