"""Temporal deformable aggregation and deformable global position attention U-Net, in numpy.

Every layer has a hand-derived backward pass checked against finite
differences; metrics and geometric ops have brute-force loop oracles.
"""
from .archive import load_archive, save_archive
from .config import RunConfig, load_run_config, parse_run_config
from .data import Clip
from .deform import (bilinear_sample, deform_conv2d, deform_conv2d_backward, deform_conv2d_forward,
                     temporal_deform_agg_conv, temporal_deform_agg_conv_backward,
                     temporal_deform_agg_conv_forward)
from .dgpa import DGPABlock, DGPAUNet, dgpa_block, dgpa_unet_forward
from .errors import (ConfigurationError, DataError, DeUNetError, DimensionError, GradientCheckError, ParseError,
                     StateError, TrainingDiverged)
from .metrics import MetricReport, assd, dice, hausdorff, surface_points
from .network import DeUNet, NetConfig, NetVariant, predict_mask
from .offset_net import OffsetNet, OffsetNetConfig, predict_offsets
from .params import ModelParams, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_phantom
from .tensor import Parameter, check_gradient, conv2d, deconv2d, matmul, maxpool2d, relu, softmax_rows
from .training import TrainConfig, adam_step, augment, cross_entropy, kfold_split, train

__version__ = "0.1.0"
