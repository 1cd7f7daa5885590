"""Semi-supervised open-set domain-adversarial training and evaluation."""

from .data import Batch, Sample, SyntheticSpec, generate_synthetic, load_manifest, sample_batch
from .evaluation import PadConfig, auc_roc, grad_cam, per_label_auc, proxy_a_distance
from .labels import LabelTopology, LabelVector, build_topology, encode_labels, has_common_label
from .networks import AdaptationModel, ModelConfig, gradient_reversal, load_checkpoint, save_checkpoint
from .objectives import LossReport, LossWeights, compute_losses
from .trainer import FitResult, TrainConfig, fit, train_step

__version__ = "0.1.0"
