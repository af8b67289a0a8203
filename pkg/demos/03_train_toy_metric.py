"""Train a small metric on synthetic data and check two of its behaviours.

Takes about 10 minutes on one CPU core. Afterwards D1 should grow as the
SNR of a non-matched test signal drops. The localisation head only starts
to climb above chance (0.1 on the 10-point grid) in this short run; the
acceptance suite trains longer on more data.

    python demos/03_train_toy_metric.py
"""
import numpy as np

from saqam.corpus import synthetic_clean_pool
from saqam.evaluation import monotonicity_suite
from saqam.model import ModelConfig, build_model
from saqam.training import (
    TrainConfig,
    build_doa_set,
    build_triplets,
    doa_accuracy,
    grid_sampler,
    split_pool,
    train_metric,
    triplet_accuracy,
)

azimuths = np.linspace(-81, 81, 10)
train_pool, test_pool = split_pool(synthetic_clean_pool(64, seed=1))
kinds = ["additive_noise", "binaural_noise"]
sampler = grid_sampler(azimuths)

triplets = build_triplets(train_pool, 200, kinds, seed=2, brir_sampler=sampler)
held_out = build_triplets(test_pool, 50, kinds, seed=3, brir_sampler=sampler)
doa_train = build_doa_set(train_pool, azimuths, 100, seed=4)
doa_test = build_doa_set(test_pool, azimuths, 50, seed=5)

model = build_model(ModelConfig(inception_width=24), seed=0)
cfg = TrainConfig(epochs=8, batch_size=8, doa_batch_size=8, lr=3e-4, crop_seconds=1.0)
hist = train_metric(model, triplets, doa_train, cfg)
print("epoch losses", np.round(hist.epoch_loss, 3))
print(f"held-out triplet accuracy {triplet_accuracy(model, held_out):.2f}")
print(f"held-out azimuth accuracy (+-2 bins) {doa_accuracy(model, doa_test):.2f}")

mono = monotonicity_suite(model, "additive_noise", (-10, -4, 2, 8, 14, 20), 6, test_pool, seed=6, azimuths=azimuths)
print("mean D1 per SNR", np.round(mono.mean_distance, 3), f"SC {mono.sc:.2f}")
