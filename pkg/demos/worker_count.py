"""Same data, different numbers of workers.

The FIC, the E-step masses and the gate choices are exact sums over workers,
so they do not depend on how the rows are split.  The expert M-step does: each
worker proposes a sparse support, the supports are put to a majority vote and
the refitted weights are averaged.  This script trains with 1, 2 and 4 workers
and compares the results.
"""

import numpy as np

from dfab import ClusterConfig, SyntheticSpec, TrainConfig, predict_batch, run_training, split_train_test, synth_generate

data, truth = synth_generate(SyntheticSpec(depth=2, n_experts=3, n_features=10, n_samples=20_000, nonzero_range=(2, 4), seed=3))
train, test = split_train_test(data, 0.8, seed=0)
st = train.standardization
oracle = np.sqrt(np.mean((predict_batch(test.X * st.x_scale + st.x_mean, truth) - st.inverse_y(test.y)) ** 2)) / st.y_scale
print(f"generator's own holdout RMSE (standardised) {oracle:.4f}")
cfg = TrainConfig(depth=2, t_max=16, eps_shrink=0.03 * train.n, max_iters=60)

for W in (1, 2, 4):
    model, rep = run_training(train, cfg, ClusterConfig(n_workers=W, checkpoint_every=0))
    rmse = np.sqrt(np.mean((predict_batch(test.X, model) - test.y) ** 2))
    print(f"workers={W}: first FIC {rep.fic[0]:.6f}, final FIC {rep.fic[-1]:.1f}, "
          f"{int(model.active.sum())} experts, holdout RMSE (standardised) {rmse:.4f}")
