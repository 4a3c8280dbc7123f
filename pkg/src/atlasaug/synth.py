"""Labeled-example synthesis and baseline generators.

A synthesized example applies an appearance delta in the atlas frame first,
then warps image and labels with the same displacement field, so labels are
correct by construction. Sampling the spatial and appearance targets from
different subjects (independent mode) crosses anatomy and intensity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import fields, models
from .fields import DisplacementField
from .models import AppearanceModel, SpatialModel

MODES = ("indep", "coupled", "rand_aug", "indep_plus_rand")


@dataclass(frozen=True)
class SynthesisPlan:
    mode: str
    spatial_target_index: Optional[int] = None
    appearance_target_index: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("indep", "coupled", "rand_aug"):
            raise ValueError(f"unknown plan mode {self.mode!r}")
        if self.mode == "coupled" and self.spatial_target_index != self.appearance_target_index:
            raise ValueError("coupled plans need equal target indices")
        if self.mode == "rand_aug" and (self.spatial_target_index is not None
                                        or self.appearance_target_index is not None):
            raise ValueError("rand_aug plans carry no target indices")


@dataclass
class LabeledExample:
    image: np.ndarray
    labels: np.ndarray
    provenance: SynthesisPlan


@dataclass
class RandAugParams:
    grid_spacing: int = 16
    amplitude: float = 6.0
    blur_radius: int = 2
    factor_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        lo, hi = self.factor_range
        if not (0 < lo <= hi):
            raise ValueError(f"factor range must be positive, got {self.factor_range}")


def rand_aug_example(atlas: np.ndarray, atlas_labels: np.ndarray,
                     params: RandAugParams, seed) -> LabeledExample:
    """Random smooth warp of the atlas pair plus a global intensity factor."""
    rng = np.random.default_rng(seed)
    f = fields.random_smooth_field(atlas.shape, params.grid_spacing,
                                   params.amplitude, params.blur_radius,
                                   rng.integers(2 ** 63))
    factor = float(rng.uniform(*params.factor_range))
    image = (factor * fields.warp_linear_raw(atlas, f)).astype(np.float32)
    labels = fields.warp_nearest(atlas_labels, f)
    plan = SynthesisPlan("rand_aug", seed=int(seed) if np.isscalar(seed) else 0)
    return LabeledExample(image, labels, plan)


class Synthesizer:
    """Applies frozen transform models to the atlas; caches the per-target
    displacement fields and appearance deltas, which are fixed once the
    models are frozen."""

    def __init__(self, atlas: np.ndarray, atlas_labels: np.ndarray,
                 spatial: SpatialModel, appearance: AppearanceModel,
                 unlabeled: list[np.ndarray],
                 rand_aug_params: Optional[RandAugParams] = None):
        if spatial is None or appearance is None:
            raise ValueError("synthesis requires trained spatial and appearance models")
        self.atlas = atlas
        self.atlas_labels = atlas_labels
        self.spatial = spatial
        self.appearance = appearance
        self.unlabeled = unlabeled
        self.rand_aug_params = rand_aug_params or RandAugParams()
        self._phi: dict[int, DisplacementField] = {}
        self._psi: dict[int, np.ndarray] = {}

    def phi(self, i: int) -> DisplacementField:
        if i not in self._phi:
            self._phi[i] = models.predict_displacement(
                self.spatial.forward_net, self.atlas, self.unlabeled[i])
        return self._phi[i]

    def psi(self, j: int) -> np.ndarray:
        if j not in self._psi:
            y = self.unlabeled[j]
            inv = models.predict_displacement(self.spatial.inverse_net, y, self.atlas)
            y_reg = fields.warp_linear_raw(y, inv)
            self._psi[j] = models.predict_appearance(self.appearance, self.atlas, y_reg)
        return self._psi[j]

    def synthesize(self, plan: SynthesisPlan) -> LabeledExample:
        if plan.mode == "rand_aug":
            ex = rand_aug_example(self.atlas, self.atlas_labels,
                                  self.rand_aug_params, plan.seed)
            return LabeledExample(ex.image, ex.labels, plan)
        i, j = plan.spatial_target_index, plan.appearance_target_index
        if i is None or j is None:
            raise ValueError(f"plan {plan} is missing target indices")
        corrected = self.atlas + self.psi(j)
        phi = self.phi(i)
        image = fields.warp_linear_raw(corrected.astype(np.float32), phi)
        labels = fields.warp_nearest(self.atlas_labels, phi)
        return LabeledExample(image, labels, plan)


def synthesize(atlas: np.ndarray, atlas_labels: np.ndarray, spatial: SpatialModel,
               appearance: AppearanceModel, unlabeled: list[np.ndarray],
               plan: SynthesisPlan) -> LabeledExample:
    return Synthesizer(atlas, atlas_labels, spatial, appearance, unlabeled).synthesize(plan)


def plan_stream(mode: str, n_unlabeled: int, seed) -> Iterator[SynthesisPlan]:
    """Lazy reproducible stream of plans; indep_plus_rand alternates the two
    generators by iteration parity."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if n_unlabeled == 0 and mode != "rand_aug":
        raise ValueError("no unlabeled subjects to sample targets from")
    rng = np.random.default_rng(seed)
    k = 0
    while True:
        sub_seed = int(rng.integers(2 ** 63))
        if mode == "rand_aug" or (mode == "indep_plus_rand" and k % 2 == 1):
            yield SynthesisPlan("rand_aug", seed=sub_seed)
        elif mode == "coupled":
            i = int(rng.integers(n_unlabeled))
            yield SynthesisPlan("coupled", i, i, sub_seed)
        else:  # indep, or the even iterations of indep_plus_rand
            i = int(rng.integers(n_unlabeled))
            j = int(rng.integers(n_unlabeled))
            yield SynthesisPlan("indep", i, j, sub_seed)
        k += 1


def enumerate_plans(mode: str, n_unlabeled: int, seed, count: int) -> list[SynthesisPlan]:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    stream = plan_stream(mode, n_unlabeled, seed)
    return [next(stream) for _ in range(count)]


def distinct_plan_count(mode: str, n_unlabeled: int) -> int:
    """Size of the discrete transform set a mode can draw from."""
    if mode == "coupled":
        return n_unlabeled
    if mode in ("indep", "indep_plus_rand"):
        return n_unlabeled * n_unlabeled
    raise ValueError(f"no finite plan set for mode {mode!r}")


def sas_propagate(spatial: SpatialModel, atlas: np.ndarray,
                  atlas_labels: np.ndarray, subject: np.ndarray) -> np.ndarray:
    """Single-atlas segmentation: warp atlas labels with the predicted field."""
    if spatial is None:
        raise ValueError("sas_propagate requires a trained spatial model")
    phi = models.predict_displacement(spatial.forward_net, atlas, subject)
    return fields.warp_nearest(atlas_labels, phi)
