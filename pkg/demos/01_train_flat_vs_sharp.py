"""Train the same backbone with the plain and the flatness-seeking objective
and compare the curvature of the solutions.

The training labels carry 20% noise: the plain objective happily memorises
them and settles in a sharper region, which shows up as a larger Hessian
trace and top eigenvalue on held-out data.
"""

import numpy as np

from flatshot import (
    Batch,
    SyntheticSpec,
    TrainConfig,
    flatness_report,
    gen_synthetic_domains,
    init_model,
    stratified_split,
    train,
    with_label_noise,
)

spec = SyntheticSpec(
    n_domains=2, classes_per_domain=6, samples_per_class=50, dim=10,
    delta=1.0, sigma=0.5, mean_scale=2.0, layout="shared",
)
source, _ = gen_synthetic_domains(spec, seed=20000)
train_dom, held_dom = stratified_split(source, 0.8, seed=0)
train_noisy = with_label_noise(train_dom, 0.2, seed=0)
held_noisy = with_label_noise(held_dom, 0.2, seed=500)

model = init_model([10, 16, 6], "tanh", seed=0)
common = dict(batch_size=4, base_lr=0.02, min_lr=0.001, total_iterations=6000,
              restart_period=3000, momentum=0.9, weight_decay=1e-4, seed=0)

print("training with the plain objective ...")
erm_model, erm_hist = train(model, train_noisy, TrainConfig(objective="erm", rho=0.0, **common))
print(f"  final loss {erm_hist.loss[-100:].mean():.4f}  ({erm_hist.wall_time:.1f}s)")

print("training with the flatness-seeking objective (rho = 0.05) ...")
sam_model, sam_hist = train(model, train_noisy, TrainConfig(objective="sam", rho=0.05, **common))
print(f"  final loss {sam_hist.loss[-100:].mean():.4f}  ({sam_hist.wall_time:.1f}s)")

held_batch = Batch(held_noisy.samples, held_noisy.local_labels())
for name, m in (("plain", erm_model), ("flat ", sam_model)):
    rep = flatness_report(m, held_batch, k=2, batch_label="held-out")
    print(
        f"{name}: Hessian trace {rep.trace:8.3f}   top eigenvalues "
        f"{rep.eigenvalues[0]:7.3f}, {rep.eigenvalues[1]:7.3f}  ({rep.trace_mode} mode)"
    )
print("lower trace / smaller leading eigenvalue = flatter solution")
