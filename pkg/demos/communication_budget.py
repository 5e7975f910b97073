"""Show that what the workers exchange does not grow with the data.

Trains the same configuration on 5,000 and 50,000 rows with four workers and
prints the bytes moved per iteration, split by message type.  Only the
initial hand-off of each worker's rows depends on N.
"""

from dfab import ClusterConfig, SyntheticSpec, TrainConfig, run_training, standardize, synth_generate
from dfab.runtime import account_bytes

cfg = TrainConfig(depth=3, t_max=16, max_iters=4, eps_shrink=0.0)
reports = {}
for n in (5_000, 50_000):
    data, _ = synth_generate(SyntheticSpec(depth=2, n_experts=3, n_features=12, n_samples=n, seed=1))
    _, reports[n] = run_training(standardize(data), cfg, ClusterConfig(n_workers=4, checkpoint_every=0))

for n, rep in reports.items():
    print(f"N={n}: bytes per iteration", [r.bytes_sent + r.bytes_received for r in rep.records])

print("\niteration 2 by message type:")
small, large = (account_bytes(reports[n], 2) for n in reports)
for tag in sorted(small):
    print(f"  {tag:<24} {small[tag]:>8} {large[tag]:>8}")
assert small == large
