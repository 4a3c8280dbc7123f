"""The full one-shot segmentation comparison, scaled down to run in about
a minute.

One labeled atlas, a pool of unlabeled subjects. Methods compared:
  SAS          warp atlas labels to each test subject (no segmenter)
  atlas-only   segmenter trained on the single labeled pair
  SAS-aug      segmenter trained on propagated (noisy) labels
  ours-indep   segmenter trained on synthesized examples, independent
               spatial/appearance targets
  supervised   segmenter trained with the true labels of the pool
               (upper bound; unavailable in the one-shot setting)

For the tuned experiment used by the acceptance tests, start from
ExperimentConfig.quick() instead (about nine CPU-minutes).
"""
import tempfile
from pathlib import Path

from atlasaug.pipeline import ExperimentConfig, Workspace, format_report
from atlasaug.toydata import ToyGenParams

cfg = ExperimentConfig()
cfg.toy = ToyGenParams(size=48, warp_amplitude=5.0, warp_spacing=10,
                       intensity_jitter=0.10, bias_amplitude=0.20,
                       noise_sigma=0.025)
cfg.n_train, cfg.n_val, cfg.n_test = 6, 2, 3
cfg.widths = (8, 16, 16)
cfg.seg_widths = (8, 16, 16)
cfg.spatial_steps = 200
cfg.appearance_steps = 150
cfg.seg_max_epochs = 6
cfg.seg_patience = 6
cfg.seg_iters_per_epoch = 8
cfg.methods = ("SAS", "atlas-only", "SAS-aug", "ours-indep", "supervised")

ws = Workspace(Path(tempfile.mkdtemp(prefix="one_shot_")) / "ws", cfg)
print(f"workspace: {ws.root}")
print("running the pipeline (data, transforms, five segmenters)...\n")
report = ws.run_all()

print(format_report(report))
print("\nnote: at this tiny scale the segmenters are undertrained and the "
      "ranking is noisy;\nthe tuned comparison lives in "
      "ExperimentConfig.quick() and tests/test_acceptance.py")
print(f"\nmetrics: {ws.report_dir / 'metrics.csv'}")
print(f"summary: {ws.report_dir / 'summary.json'}")
