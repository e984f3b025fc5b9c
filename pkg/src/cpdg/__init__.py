"""Self-supervised pre-training and transfer fine-tuning for memory-based temporal graph encoders."""

from .dgnn import DGNN, BackboneConfig, MemoryStore, preset
from .finetune import EIEConfig, FinetuneConfig, finetune, fuse_checkpoints
from .graph import ChronoSplit, Event, GeneratorConfig, TemporalGraph, chrono_split, generate_synthetic, ingest_csv
from .metrics import average_precision, evaluate, micro_f1, roc_auc
from .pretrain import CheckpointSequence, LossConfig, PretrainConfig, combined_loss, pretrain
from .sampler import SamplerConfig, chrono_probs, reverse_chrono_probs, sample_eps_dfs, sample_eta_bfs

__version__ = "0.1.0"
