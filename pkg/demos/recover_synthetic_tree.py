"""Fit a gated tree of sparse linear experts to data drawn from a known tree.

Generates a depth-2 ground truth with three experts, trains from an
over-complete depth-3 tree (eight experts) and prints how far the learned
model is from the generator, both in structure and in holdout error.
"""

import logging

import numpy as np

from dfab import ClusterConfig, SyntheticSpec, TrainConfig, predict_batch, run_training, split_train_test, synth_generate
from dfab.cli import render_model

logging.basicConfig(level=logging.WARNING)

data, truth = synth_generate(SyntheticSpec(depth=2, n_experts=3, n_features=10, n_samples=30_000, nonzero_range=(2, 4), seed=7))
train, test = split_train_test(data, 0.8, seed=0)
st = train.standardization

print("ground truth:")
print(render_model(truth))

cfg = TrainConfig(depth=3, t_max=32, eps_shrink=0.03 * train.n, max_iters=120)
model, report = run_training(train, cfg, ClusterConfig(n_workers=2, checkpoint_every=0))

print(f"\nFIC went from {report.fic[0]:.1f} to {report.fic[-1]:.1f} over {len(report.records)} iterations")
print("active experts per iteration:", [r.n_active for r in report.records[::10]])

# errors on the original target scale
y_test = st.inverse_y(test.y)
X_raw = test.X * st.x_scale + st.x_mean
learned = np.sqrt(np.mean((st.inverse_y(predict_batch(test.X, model)) - y_test) ** 2))
oracle = np.sqrt(np.mean((predict_batch(X_raw, truth) - y_test) ** 2))
print(f"holdout RMSE: learned {learned:.4f}, generator {oracle:.4f} (ratio {learned / oracle:.3f})")

print("\nlearned model (standardised units):")
print(render_model(model, train.feature_names))
