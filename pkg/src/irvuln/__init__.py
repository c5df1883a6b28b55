"""Transformer-based vulnerability detection on LLVM IR program slices."""

from .corpus import CorpusSpec, SplitSpec, generate_synthetic, load_dataset, save_dataset, split
from .evaluation import AblationTable, EvalReport, ablate, evaluate, predict
from .model import ModelConfig, TransformerModel, forward, preset_config
from .preprocess import IrProgram, PreprocessConfig, preprocess
from .tokenizer import Vocabulary, build_vocab, decode, encode
from .training import TrainConfig, TrainReport, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "AblationTable", "CorpusSpec", "EvalReport", "IrProgram", "ModelConfig", "PreprocessConfig",
    "SplitSpec", "TrainConfig", "TrainReport", "TransformerModel", "Vocabulary", "ablate",
    "build_vocab", "decode", "encode", "evaluate", "forward", "generate_synthetic", "gradient_check",
    "load_dataset", "predict", "preprocess", "preset_config", "save_dataset", "split", "train",
]
