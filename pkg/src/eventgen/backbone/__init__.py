from .autoencoder import ToyAutoencoder
from .hooks import AttentionTrace, InterventionSet, LayerAddress, addr, merge_records
from .text import (
    COLOR_IDS,
    COLOR_WORDS,
    NULL_ID,
    START_ID,
    VOCAB,
    PromptEmbedding,
    TextEmbedder,
)
from .train import TrainResult, evaluate_loss, train_toy
from .unet import Backbone, BackboneConfig, LayerInfo, TinyUNet
from .weights_io import load_weights, read_blob, save_weights, write_blob

__all__ = [
    "AttentionTrace",
    "Backbone",
    "BackboneConfig",
    "COLOR_IDS",
    "COLOR_WORDS",
    "InterventionSet",
    "LayerAddress",
    "LayerInfo",
    "NULL_ID",
    "PromptEmbedding",
    "START_ID",
    "TextEmbedder",
    "TinyUNet",
    "ToyAutoencoder",
    "TrainResult",
    "VOCAB",
    "evaluate_loss",
    "train_toy",
    "addr",
    "load_weights",
    "merge_records",
    "read_blob",
    "save_weights",
    "write_blob",
]
