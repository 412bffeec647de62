"""Gigapixel-scale vision transformer with dilated attention, on numpy."""
from .attention import (DilationSchedule, AttentionWeights, dilated_attention, multihead_dilated_attention,
                        schedule_for_tokens)
from .encoder import EncoderConfig, EncoderWeights, encode, init_weights, param_count
from .image import ImageConfig, encode_image, open_image, token_grid
from .metrics import auc_binary, auc_macro, c_index
from .parallel import distributed_forward, partition
from .tasks import FinetuneConfig, finetune, parse_manifest
from .tensor import Graph, Tensor

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights", "DilationSchedule", "EncoderConfig", "EncoderWeights", "FinetuneConfig", "Graph",
    "ImageConfig", "Tensor", "auc_binary", "auc_macro", "c_index", "dilated_attention", "distributed_forward",
    "encode", "encode_image", "finetune", "init_weights", "multihead_dilated_attention", "open_image",
    "param_count", "parse_manifest", "partition", "schedule_for_tokens", "token_grid",
]
