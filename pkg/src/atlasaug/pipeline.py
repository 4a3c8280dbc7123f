"""End-to-end toy experiment: generate data, train transform models, train
one segmenter per method, predict the test set, evaluate.

Every stage is deterministic in (config, seed); stage seeds are derived
from the master seed so runs are byte-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import models, segment, synth, toydata, vtf
from .models import AppearanceModel, SpatialModel
from .synth import RandAugParams, Synthesizer
from .toydata import DatasetManifest, ToyGenParams

TABLE_METHODS = ["SAS", "SAS-aug", "rand-aug", "ours-coupled", "ours-indep",
                 "ours-indep+rand-aug", "supervised"]

# CLI mode names -> report method names
MODE_TO_METHOD = {"indep": "ours-indep", "coupled": "ours-coupled",
                  "rand-aug": "rand-aug", "indep+rand": "ours-indep+rand-aug",
                  "sas-aug": "SAS-aug", "atlas-only": "atlas-only",
                  "supervised": "supervised"}
MODE_TO_STREAM = {"indep": "indep", "coupled": "coupled", "rand-aug": "rand_aug",
                  "indep+rand": "indep_plus_rand"}


@dataclass
class ExperimentConfig:
    seed: int = 42
    threads: int = 1
    # corpus: n_train counts the atlas, so 21 = 1 atlas + 20 unlabeled
    toy: ToyGenParams = dc_field(default_factory=ToyGenParams)
    n_train: int = 21
    n_val: int = 5
    n_test: int = 10
    # transform models
    widths: tuple = (16, 32, 32)
    smoothness_weight: float = 1.0
    ncc_window: int = 9
    lambda_a: float = 0.02
    learning_rate: float = 5e-4
    spatial_steps: int = 2000
    appearance_steps: int = 2000
    # rand-aug generator
    rand_aug: RandAugParams = dc_field(default_factory=RandAugParams)
    # segmenter; narrower than the transform nets, which keeps CPU training
    # fast without hurting toy-scale accuracy
    seg_widths: tuple = (8, 16, 16)
    seg_max_epochs: int = 20
    seg_patience: int = 5
    seg_iters_per_epoch: int = 10
    seg_batch_size: int = 16
    methods: tuple = tuple(MODE_TO_METHOD.values())

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def quick(cls) -> "ExperimentConfig":
        """Reduced-scale preset tuned for a roughly ten-minute CPU run.

        Uses a smaller corpus and shorter training schedules than the
        defaults while keeping the same method comparisons meaningful.
        """
        cfg = cls()
        cfg.toy = ToyGenParams(size=64, warp_amplitude=6.0, warp_spacing=10,
                               intensity_jitter=0.10, bias_amplitude=0.20,
                               noise_sigma=0.025)
        cfg.n_train, cfg.n_val, cfg.n_test = 13, 4, 10
        cfg.spatial_steps, cfg.appearance_steps = 700, 500
        cfg.seg_widths = (12, 24, 24)
        cfg.seg_max_epochs = 30
        cfg.seg_patience = 8
        cfg.seg_iters_per_epoch = 12
        cfg.methods = ("SAS", "atlas-only", "SAS-aug", "ours-indep",
                       "supervised")
        return cfg

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        for key, value in data.items():
            if key == "toy":
                cfg.toy = ToyGenParams(**{**asdict(cfg.toy), **value})
            elif key == "rand_aug":
                ra = asdict(cfg.rand_aug)
                ra.update(value)
                ra["factor_range"] = tuple(ra["factor_range"])
                cfg.rand_aug = RandAugParams(**ra)
            elif hasattr(cfg, key):
                if isinstance(getattr(cfg, key), tuple) and key != "methods":
                    value = tuple(value)
                elif key == "methods":
                    value = tuple(value)
                setattr(cfg, key, value)
            else:
                raise KeyError(f"unknown config key {key!r}")
        return cfg

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(json.load(fh))


def _stage_seed(cfg: ExperimentConfig, stage: str) -> int:
    ident = int.from_bytes(stage.encode(), "little") % (2 ** 31)
    return int(np.random.SeedSequence([cfg.seed, ident]).generate_state(1)[0])


class Workspace:
    """On-disk layout of one experiment run."""

    def __init__(self, out_dir, cfg: ExperimentConfig):
        self.root = Path(out_dir)
        self.cfg = cfg
        self.data_dir = self.root / "data"
        self.model_dir = self.root / "models"
        self.pred_dir = self.root / "predictions"
        self.report_dir = self.root / "report"

    def write_config_snapshot(self, where: Path) -> None:
        where.mkdir(parents=True, exist_ok=True)
        (where / "resolved_config.json").write_text(self.cfg.to_json())

    # ---- data ----
    def gen_data(self) -> DatasetManifest:
        cfg = self.cfg
        toy = ToyGenParams(**{**asdict(cfg.toy), "seed": cfg.seed})
        manifest = toydata.generate_toy_dataset(toy, cfg.n_train, cfg.n_val,
                                                cfg.n_test, self.data_dir)
        self.write_config_snapshot(self.data_dir)
        return manifest

    def manifest(self) -> DatasetManifest:
        return DatasetManifest.load(self.data_dir / "manifest.json")

    def _load(self, rel) -> np.ndarray:
        return vtf.read_vtf(self.data_dir / rel)

    def load_corpus(self):
        m = self.manifest()
        atlas = self._load(m.atlas_image)
        atlas_labels = self._load(m.atlas_labels)
        unlabeled = [self._load(p) for p in m.unlabeled]
        val = ([self._load(p) for p in m.val_images],
               [self._load(p) for p in m.val_labels])
        test = ([self._load(p) for p in m.test_images],
                [self._load(p) for p in m.test_labels])
        train_labels = [self._load(p) for p in m.unlabeled_labels]
        return atlas, atlas_labels, unlabeled, val, test, train_labels

    # ---- transform models ----
    def train_spatial(self) -> SpatialModel:
        cfg = self.cfg
        atlas, _, unlabeled, *_ = self.load_corpus()
        model = SpatialModel.create(spatial_ndim=atlas.ndim, widths=cfg.widths,
                                    smoothness_weight=cfg.smoothness_weight,
                                    ncc_window=cfg.ncc_window,
                                    seed=_stage_seed(cfg, "spatial-init"))
        models.train_spatial(model, atlas, unlabeled, cfg.spatial_steps,
                             _stage_seed(cfg, "spatial-train"), cfg.learning_rate)
        self.model_dir.mkdir(parents=True, exist_ok=True)
        models.save_spatial(self.model_dir / "spatial.ckpt", model)
        self.write_config_snapshot(self.model_dir)
        return model

    def train_appearance(self) -> AppearanceModel:
        cfg = self.cfg
        atlas, atlas_labels, unlabeled, *_ = self.load_corpus()
        spatial = models.load_spatial(self.model_dir / "spatial.ckpt")
        model = AppearanceModel.create(spatial_ndim=atlas.ndim, widths=cfg.widths,
                                       lambda_a=cfg.lambda_a,
                                       seed=_stage_seed(cfg, "appearance-init"))
        models.train_appearance(model, atlas, atlas_labels, unlabeled, spatial,
                                cfg.appearance_steps,
                                _stage_seed(cfg, "appearance-train"),
                                cfg.learning_rate)
        models.save_appearance(self.model_dir / "appearance.ckpt", model)
        self.write_config_snapshot(self.model_dir)
        return model

    def load_models(self) -> tuple[SpatialModel, AppearanceModel]:
        return (models.load_spatial(self.model_dir / "spatial.ckpt"),
                models.load_appearance(self.model_dir / "appearance.ckpt"))

    # ---- example streams for segmenter training ----
    def _make_stream(self, method: str, atlas, atlas_labels, unlabeled,
                     train_labels, synthesizer: Synthesizer):
        cfg = self.cfg
        n = len(unlabeled)
        if method == "atlas-only":
            return lambda rng: (atlas, atlas_labels)
        if method == "supervised":
            pool = [(atlas, atlas_labels)] + list(zip(unlabeled, train_labels))
            return lambda rng: pool[int(rng.integers(len(pool)))]
        if method == "SAS-aug":
            sas_labels = [synth.sas_propagate(synthesizer.spatial, atlas,
                                              atlas_labels, y) for y in unlabeled]
            pool = [(atlas, atlas_labels)] + list(zip(unlabeled, sas_labels))
            return lambda rng: pool[int(rng.integers(len(pool)))]
        stream_mode = {"rand-aug": "rand_aug", "ours-indep": "indep",
                       "ours-coupled": "coupled",
                       "ours-indep+rand-aug": "indep_plus_rand"}[method]
        plans = synth.plan_stream(stream_mode, n,
                                  _stage_seed(cfg, f"plans-{method}"))
        if stream_mode == "rand_aug":
            # the random generator has no finite plan set; treat it like one
            # synthetic example per unlabeled subject
            atlas_share = 1.0 / (n + 1)
        else:
            atlas_share = 1.0 / (synth.distinct_plan_count(stream_mode, n) + 1)

        def draw(rng):
            if rng.random() < atlas_share:
                return atlas, atlas_labels
            ex = synthesizer.synthesize(next(plans))
            return ex.image, ex.labels

        return draw

    def train_seg_method(self, method: str) -> segment.SegModel:
        cfg = self.cfg
        atlas, atlas_labels, unlabeled, (val_im, val_lb), _, train_labels = self.load_corpus()
        spatial, appearance = self.load_models()
        synthesizer = Synthesizer(atlas, atlas_labels, spatial, appearance,
                                  unlabeled, cfg.rand_aug)
        stream = self._make_stream(method, atlas, atlas_labels, unlabeled,
                                   train_labels, synthesizer)
        model = segment.SegModel.create(cfg.toy.label_count, widths=cfg.seg_widths,
                                        seed=_stage_seed(cfg, f"seg-init-{method}"))
        segment.train_segmenter(model, stream, val_im, val_lb,
                                cfg.seg_max_epochs, cfg.seg_patience,
                                _stage_seed(cfg, f"seg-train-{method}"),
                                iters_per_epoch=cfg.seg_iters_per_epoch,
                                batch_size=cfg.seg_batch_size,
                                learning_rate=cfg.learning_rate)
        return model

    # ---- predictions ----
    def predict_method(self, method: str) -> list[np.ndarray]:
        atlas, atlas_labels, _, _, (test_im, _), _ = self.load_corpus()
        if method == "SAS":
            spatial, _ = self.load_models()
            preds = [synth.sas_propagate(spatial, atlas, atlas_labels, y)
                     for y in test_im]
        else:
            model = self.train_seg_method(method)
            preds = [segment.predict_labels(model, y) for y in test_im]
        out = self.pred_dir / method
        out.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(preds):
            vtf.write_vtf(out / f"test_{i:03d}.vtf", p.astype(np.int32))
        self.write_config_snapshot(self.pred_dir)
        return preds

    def load_predictions(self, method: str) -> list[np.ndarray]:
        out = self.pred_dir / method
        if not out.is_dir():
            raise FileNotFoundError(f"no predictions for method {method!r}")
        n = self.cfg.n_test
        preds = []
        for i in range(n):
            p = out / f"test_{i:03d}.vtf"
            if not p.exists():
                raise FileNotFoundError(
                    f"missing prediction: method {method!r}, subject {i}")
            preds.append(vtf.read_vtf(p))
        return preds

    # ---- evaluation ----
    def evaluate(self, method_names=None) -> segment.EvalReport:
        cfg = self.cfg
        names = list(method_names or cfg.methods)
        _, atlas_labels, _, _, (_, test_lb), _ = self.load_corpus()
        preds = {name: self.load_predictions(name) for name in names}
        baseline = "SAS" if "SAS" in preds else names[0]
        report = segment.evaluate_suite(preds, test_lb, baseline,
                                        cfg.toy.label_count,
                                        reference_labels=atlas_labels)
        self.report_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(self.report_dir / "metrics.csv")
        report.write_json(self.report_dir / "summary.json")
        self.write_config_snapshot(self.report_dir)
        return report

    def run_all(self, method_names=None) -> segment.EvalReport:
        names = list(method_names or self.cfg.methods)
        self.gen_data()
        self.train_spatial()
        self.train_appearance()
        for name in names:
            self.predict_method(name)
        return self.evaluate(names)


def format_report(report: segment.EvalReport) -> str:
    """Plain-text summary table, baseline improvements included."""
    lines = [f"{'method':<22} {'mean Dice':>10} {'std':>8} {'vs ' + report.baseline:>12}"]
    meths = report.summary["methods"]
    for name in sorted(meths, key=lambda n: -meths[n]["mean_dice"]):
        m = meths[name]
        lines.append(f"{name:<22} {m['mean_dice']:>10.4f} {m['std_dice']:>8.4f} "
                     f"{m['improvement_vs_baseline']:>12.4f}")
    return "\n".join(lines) + "\n"
