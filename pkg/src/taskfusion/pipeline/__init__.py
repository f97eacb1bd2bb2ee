"""End-to-end orchestration: data, phases, checkpoints, inference, reports."""

from .checkpoint import Checkpoint, config_hash, file_hash, load_checkpoint, save_checkpoint
from .config import DataConfig, ExperimentConfig, JointConfig, component_seed, experiment_from_dict, load_experiment_config
from .data import ImagePair, PatchSet, ingest, patchify, read_image, rgb_to_ycbcr, split_pairs, write_image, ycbcr_to_rgb
from .evaluation import FusionModel, evaluate_dirs, fuse, fuse_pairs, report, write_metric_csv
from .phases import (
    CHECKPOINTS,
    HISTORIES,
    load_data,
    run_phase_joint,
    run_phase_meta,
    run_phase_search,
    run_pipeline,
    write_history,
)
from .synth import KINDS as SYNTH_KINDS, synth_pairs, write_pairs
