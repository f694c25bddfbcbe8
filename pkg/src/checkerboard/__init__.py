"""Learned image codec with a checkerboard context model and two-pass parallel decoding."""

from . import bench, codec, entropy, masklab, ops, rangecoder, tensor, trainer
from . import network as net
from .codec import Container, decode_image, encode_image
from .errors import ContractError, DecodeError, DimensionError, NumericError, TrainingError
from .network import ModelConfig, ModelWeights
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Container",
    "ContractError",
    "DecodeError",
    "DimensionError",
    "ModelConfig",
    "ModelWeights",
    "NumericError",
    "TrainConfig",
    "TrainingError",
    "bench",
    "codec",
    "decode_image",
    "encode_image",
    "entropy",
    "masklab",
    "net",
    "ops",
    "rangecoder",
    "tensor",
    "trainer",
]
