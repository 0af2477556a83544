"""Dual-head surgical scene segmentation: anatomy and tool transformer
segmenters fused by a confidence-priority rule."""
from .config import TrainConfig, load_config
from .data import load_dataset, synth_generate
from .decoders import DecoderConfig, SegModel, mlp_decode, skip_decode
from .encoder import PRESETS, EncoderVariantConfig, FeaturePyramid, encoder_forward
from .evaluate import ablate_losses, evaluate, infer_overlay
from .fusion import LabelRegistry, SegOutput, derive_output, morph_refine, priority_fuse
from .loss import LossConfig, combined_loss, cross_entropy_loss, tversky_index, tversky_loss
from .metrics import ConfusionMatrix, accumulate, dice_per_class, iou_per_class, mean_dice, miou
from .train import train

__version__ = "0.1.0"
