"""
Train a small joint model and relight night scenes
==================================================

Generates 2,000 paired scenes, trains the desk configuration for a few
epochs (raise EPOCHS for a converged model), reports the latent-space
diagnostics and decodes night images with the mean day appearance code.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np

from jointcodes import analysis as A
from jointcodes import data as D
from jointcodes import training as T
from jointcodes.cli import evaluate, swap_metrics

EPOCHS = 20
out = Path("demo_out")
out.mkdir(exist_ok=True)

samples = D.generate_dataset(2000, seed=0)
train, val, test = (D.to_arrays(p) for p in D.split(samples, (0.8, 0.1, 0.1), 0))
print(f"train {len(train)}  val {len(val)}  test {len(test)}")

config = replace(T.PRESETS["desk"], max_epochs=EPOCHS)
result = T.fit(config, train, val, on_epoch=lambda row, _: print(f"epoch {row['epoch']}  val rec {row['val_rec']:.3f}"))

metrics, tables = evaluate(result.params, val)
for name, value in metrics.items():
    print(f"{name:>26s} {value:.3f}")

coords, frac = A.pca_project(tables["appearance"], 2)
(out / "appearance_pca.svg").write_text(A.scatter_svg(coords, tables["appearance"].appearance, "appearance codes"))

# class 1 is a night palette, class 0 a day palette
swap = swap_metrics(result.params, train, val, source=1, target=0)
print(swap["rates"])
n = min(6, len(swap["indices"]))
D.write_ppm(out / "night_to_day.ppm", D.image_grid(list(swap["original"][:n]) + list(swap["edited"][:n]), ncols=n))
