"""Spatio-temporal graph transformer for pedestrian trajectory prediction,
built on a small numpy reverse-mode autodiff core."""

from .tensor import Tensor, concat, dropout, layer_norm, linear, parameter, softmax, stack
from .optim import AdamState, adam_step, zero_grads
from .attention import (
    AttentionParams, TemporalBlockParams, multi_head, positional_encoding,
    scaled_attention, temporal_block,
)
from .graph import (
    InteractionGraph, TGConvParams, build_graph, spatial_block, tgconv,
    tgconv_multihead,
)
from .model import (
    GraphMemory, StarConfig, StarParams, config_for_variant, decode_step,
    embed_inputs, encoder1, encoder2, init_params, load_checkpoint,
    memory_read, rollout, save_checkpoint,
)
from .data import (
    Batch, TrajectoryScene, augment_rotation, leave_one_out_split, load_dataset,
    make_scenes, merge_scenes, pack_batches, preprocess,
)
from .trainer import (
    EvalReport, TrainSpec, ade, best_of_k, evaluate, fde, run_ablation,
    scene_loss, train, write_reports,
)
from .synthetic import make_synthetic_scenes, simulate_scene

__version__ = "0.1.0"
