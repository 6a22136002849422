"""Domain-generalized semantic segmentation with wild-image feature stylization,
content/style extension losses and consistency regularization."""

from .config import RunConfig, toy_preset
from .datapipe import synth_toy
from .embed import ProjectedGrid, normalize_grid, uniform_subsample
from .evalreport import ConfusionMatrix, evaluate_domains, miou
from .featstats import ChannelStats, channel_stats, stylize
from .losses import LossTerms, LossWeights, cel_loss, scr_loss, sce_loss, seg_ce, total_loss, wce_loss
from .netgraph import NetworkAssembly, conv_backbone, strip_for_inference
from .trainer import poly_lr, run_training, train_step
from .wilddict import ContentStore

__version__ = "0.1.0"
