"""Learned spatial and appearance augmentation for one-shot segmentation."""

from .engine import Adam, AdamState, Graph, Tensor, adam_update, backprop
from .fields import (DisplacementField, boundary_mask, compose,
                     random_smooth_field, warp_linear, warp_linear_raw,
                     warp_nearest)
from .models import (AppearanceModel, SpatialModel, UNet,
                     appearance_total_loss, predict_appearance,
                     predict_displacement, train_appearance, train_spatial)
from .pipeline import ExperimentConfig, Workspace
from .segment import EvalReport, SegModel, dice, evaluate_suite, predict_labels, train_segmenter
from .synth import (LabeledExample, RandAugParams, SynthesisPlan, Synthesizer,
                    enumerate_plans, plan_stream, rand_aug_example,
                    sas_propagate, synthesize)
from .toydata import DatasetManifest, ToyGenParams, generate_toy_dataset
from .vtf import read_vtf, write_vtf

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
