"""Procedural toy corpus: one labeled atlas, unlabeled training images,
labeled validation and test images.

The canonical template is a set of nested smooth regions (background, ring,
interior, central blob for four labels). Each subject is the template
warped by a random smooth field; its intensities are drawn per label around
base values, modulated by a smooth multiplicative bias field plus additive
noise, with background voxels zeroed. Labels are warped with the same
field, so ground truth is exact by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import fields, vtf
from .fields import DisplacementField


@dataclass
class ToyGenParams:
    size: int = 96
    label_count: int = 4
    warp_amplitude: float = 3.0
    warp_spacing: int = 12
    warp_blur: int = 2
    base_intensities: tuple = (0.0, 1.0, 0.6, 1.4)
    intensity_jitter: float = 0.08
    # smooth anatomy-linked shading added inside the head; gives the
    # correlation loss a gradient within otherwise flat regions
    shading_amplitude: float = 0.25
    bias_amplitude: float = 0.12
    noise_sigma: float = 0.02
    seed: int = 42

    def __post_init__(self):
        if self.label_count < 3:
            raise ValueError("need at least 3 labels including background")
        if len(self.base_intensities) != self.label_count:
            raise ValueError("one base intensity per label required")
        fg = sorted(self.base_intensities[1:])
        gaps = [b - a for a, b in zip(fg, fg[1:])]
        if self.noise_sigma > 0 and min(gaps) < 5 * self.noise_sigma:
            raise ValueError("foreground intensities must differ by >= 5x noise sigma")


@dataclass
class DatasetManifest:
    atlas_image: str
    atlas_labels: str
    unlabeled: list[str]
    val_images: list[str]
    val_labels: list[str]
    test_images: list[str]
    test_labels: list[str]
    label_names: list[str]
    # ground-truth labels of the unlabeled pool; only the fully supervised
    # baseline may read these
    unlabeled_labels: list[str] = dc_field(default_factory=list)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            data = json.load(fh)
        m = DatasetManifest(**data)
        if len(m.val_images) != len(m.val_labels) or len(m.test_images) != len(m.test_labels):
            raise ValueError("paired image/label lists differ in length")
        base = path.parent
        for p in ([m.atlas_image, m.atlas_labels] + m.unlabeled + m.val_images
                  + m.val_labels + m.test_images + m.test_labels + m.unlabeled_labels):
            if not (base / p).exists():
                raise FileNotFoundError(f"manifest entry missing on disk: {p}")
        return m

    def resolve(self, path, base) -> Path:
        return Path(base) / path


def make_template(params: ToyGenParams) -> tuple[np.ndarray, np.ndarray]:
    """Canonical labels and image for the undeformed template."""
    labels = template_labels(params)
    image = _render(params, labels, template_shading(params),
                    np.asarray(params.base_intensities, dtype=np.float64))
    return labels, image


def template_labels(params: ToyGenParams) -> np.ndarray:
    s = params.size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    cy, cx = s / 2.0, s / 2.0
    # slightly anisotropic head outline
    r = np.sqrt(((yy - cy) / (0.40 * s)) ** 2 + ((xx - cx) / (0.33 * s)) ** 2)
    labels = np.zeros((s, s), dtype=np.int32)
    labels[r <= 1.0] = 1                       # outer ring
    labels[r <= 0.80] = 2                      # interior
    # central blob, off-center
    by, bx = cy + 0.08 * s, cx - 0.05 * s
    rb = np.sqrt(((yy - by) / (0.16 * s)) ** 2 + ((xx - bx) / (0.13 * s)) ** 2)
    labels[(rb <= 1.0) & (labels == 2)] = 3
    # extra labels become additional nested rings inside the interior
    for extra in range(4, params.label_count):
        thresh = 0.80 * (0.8 ** (extra - 3))
        labels[(r <= thresh) & (labels == 2)] = extra
    return labels


def template_shading(params: ToyGenParams) -> np.ndarray:
    """Smooth center-bright shading tied to the template anatomy."""
    s = params.size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    cy, cx = s / 2.0, s / 2.0
    r = np.sqrt(((yy - cy) / (0.40 * s)) ** 2 + ((xx - cx) / (0.33 * s)) ** 2)
    return (params.shading_amplitude * (1.0 - np.clip(r, 0.0, 1.0))).astype(np.float32)


def _render(params: ToyGenParams, labels: np.ndarray, shading: np.ndarray,
            intensities: np.ndarray) -> np.ndarray:
    image = intensities[labels] + shading
    image[labels == 0] = 0.0
    return image.astype(np.float32)


def subject_rng(params: ToyGenParams, stream_id: int) -> np.random.Generator:
    """Counter-based split of the master seed: one stream per subject."""
    return np.random.default_rng([params.seed, stream_id])


def subject_field(params: ToyGenParams, stream_id: int) -> DisplacementField:
    if stream_id == 0:
        return DisplacementField.zero((params.size, params.size))
    rng = subject_rng(params, stream_id)
    return fields.random_smooth_field((params.size, params.size),
                                      params.warp_spacing, params.warp_amplitude,
                                      params.warp_blur, rng.integers(2 ** 63))


def make_subject(params: ToyGenParams, template_labels: np.ndarray,
                 stream_id: int) -> tuple[np.ndarray, np.ndarray]:
    """One subject (image, labels); stream 0 is the undeformed template."""
    shading = template_shading(params)
    if stream_id == 0:
        labels = template_labels.copy()
        image = _render(params, labels,
                        shading, np.asarray(params.base_intensities, dtype=np.float64))
        return image, labels
    rng = subject_rng(params, stream_id)
    f = subject_field(params, stream_id)   # consumes the first draw of the stream
    labels = fields.warp_nearest(template_labels, f)
    intens = np.asarray(params.base_intensities, dtype=np.float64).copy()
    intens[1:] += rng.normal(0.0, params.intensity_jitter, size=len(intens) - 1)
    image = intens[labels] + fields.warp_linear_raw(shading, f)
    if params.bias_amplitude > 0:
        bias_field = fields.random_smooth_field(
            labels.shape, max(params.size // 4, 2), params.bias_amplitude, 4,
            rng.integers(2 ** 63))
        image = image * (1.0 + bias_field.components[0].astype(np.float64))
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    image[labels == 0] = 0.0
    return image.astype(np.float32), labels


def generate_toy_dataset(params: ToyGenParams, n_train: int, n_val: int,
                         n_test: int, out_dir) -> DatasetManifest:
    """Write the corpus as VTF files plus manifest and generation sidecar."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("all split sizes must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template_labels, _ = make_template(params)

    def emit(kind: str, local_idx: int, stream_id: int, with_labels: bool):
        image, labels = make_subject(params, template_labels, stream_id)
        ip = f"{kind}_{local_idx:03d}_image.vtf"
        vtf.write_vtf(out / ip, image)
        lp = None
        if with_labels:
            lp = f"{kind}_{local_idx:03d}_labels.vtf"
            vtf.write_vtf(out / lp, labels.astype(np.int32))
        return ip, lp

    manifest = DatasetManifest(
        atlas_image="", atlas_labels="", unlabeled=[], val_images=[],
        val_labels=[], test_images=[], test_labels=[],
        label_names=["background"] + [f"region_{i}" for i in range(1, params.label_count)],
    )
    stream = 0
    streams = {"train": [], "val": [], "test": []}
    for i in range(n_train):
        ip, lp = emit("train", i, stream, with_labels=True)
        if i == 0:
            manifest.atlas_image, manifest.atlas_labels = ip, lp
        else:
            manifest.unlabeled.append(ip)
            manifest.unlabeled_labels.append(lp)
        streams["train"].append(stream)
        stream += 1
    for i in range(n_val):
        ip, lp = emit("val", i, stream, with_labels=True)
        manifest.val_images.append(ip)
        manifest.val_labels.append(lp)
        streams["val"].append(stream)
        stream += 1
    for i in range(n_test):
        ip, lp = emit("test", i, stream, with_labels=True)
        manifest.test_images.append(ip)
        manifest.test_labels.append(lp)
        streams["test"].append(stream)
        stream += 1
    manifest.save(out / "manifest.json")
    with open(out / "toy_gen.json", "w") as fh:
        json.dump({"params": asdict(params), "streams": streams,
                   "n_train": n_train, "n_val": n_val, "n_test": n_test},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
