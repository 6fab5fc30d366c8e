"""Cross-modality metric learning at desk scale.

Trains a small feature extractor so that two sensing modalities of the same
identity land close together on the unit sphere, adds a learned pair
discriminator on top, and evaluates the result with standard biometric
identification and verification metrics.
"""

from .autograd import Tensor, gradcheck
from .backbone import (BackboneConfig, Network, build_pretrain_network,
                       load_network, save_network, swap_head)
from .config import RunConfig, load_config, parse_config
from .data import (Dataset, SamplerConfig, SynthConfig, generate_synth,
                   load_dataset, load_image_dir, save_dataset, split_by_class)
from .discriminator import (PairDiscriminator, cmd_score, genuine_labels,
                            pair_concat)
from .evaluation import EvalReport, ProtocolConfig, evaluate
from .losses import (LabeledBatch, LossConfig, class_mean_triplet_loss,
                     triplet_loss, unit_class_loss)
from .training import OptimConfig, pretrain, run_ablation, train_hfr

__version__ = "0.1.0"

__all__ = [
    "Tensor", "gradcheck",
    "BackboneConfig", "Network", "build_pretrain_network", "swap_head",
    "save_network", "load_network",
    "RunConfig", "load_config", "parse_config",
    "Dataset", "SynthConfig", "SamplerConfig", "generate_synth",
    "save_dataset", "load_dataset", "load_image_dir", "split_by_class",
    "PairDiscriminator", "pair_concat", "genuine_labels", "cmd_score",
    "EvalReport", "ProtocolConfig", "evaluate",
    "LabeledBatch", "LossConfig", "triplet_loss", "class_mean_triplet_loss",
    "unit_class_loss",
    "OptimConfig", "pretrain", "train_hfr", "run_ablation",
]
