"""Calibration: train the acceptance-scale posterior (same recipe the test uses)."""
import time
import torch
from caasl import posterior as P
from caasl.nets import AltAttentionConfig
from caasl.priors import PriorSpec
from caasl.scm import GraphPrior

torch.set_num_threads(1)
prior = PriorSpec(domain="synthetic", d=4, graph=GraphPrior("erdos-renyi", 0.75))
cfg = P.PosteriorTrainConfig(
    prior=prior,
    n_range=(20, 29),
    interventional_fraction=(0.0, 0.35),
    datasets_per_batch=8,
    steps=20000,
    lr=1e-3,
    arch=AltAttentionConfig(num_layers=2),
)
t0 = time.time()
net, log = P.train_posterior(cfg, seed=123)
print(f"trained in {(time.time()-t0)/60:.1f} min; loss {log[0][1]:.3f} -> {log[-1][1]:.3f}")
P.save_posterior(net, "/root/pkg/.calib/posterior_d4.ckpt")
acc = P.held_out_edge_accuracy(net, cfg, n_models=200, seed=9)
print(f"held-out edge accuracy: {acc:.4f}")
