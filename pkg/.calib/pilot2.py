"""Pilot 2: lower target entropy so the mean action commits."""
import sys, time
import numpy as np, torch
from scipy import stats
from caasl import harness, posterior as P, rl
from caasl.env import EnvConfig
from caasl.nets import AltAttentionConfig
from caasl.priors import PriorSpec
from caasl.scm import GraphPrior

torch.set_num_threads(1)
tag, target_h, steps = sys.argv[1], float(sys.argv[2]), int(sys.argv[3])
post = P.load_posterior("/root/pkg/.calib/posterior_d4.ckpt")
prior = PriorSpec(domain="synthetic", d=4, graph=GraphPrior("erdos-renyi", 0.75))
env_cfg = EnvConfig(domain="synthetic", d=4, n0=20, budget=8)

sac = rl.SacConfig(
    m_critics=2, gamma=0.9, batch_size=32,
    policy_lr=3e-4, q_lr=3e-3, alpha_lr=1e-2,
    target_entropy=target_h,
    n_env_steps=steps, update_after=200, eval_every=500, n_eval_envs=8,
    arch=AltAttentionConfig(num_layers=1, dropout=0.1),
    q_arch=AltAttentionConfig(num_layers=1))
t0 = time.time()
res = rl.train(sac, env_cfg, prior, post, seed=7, out_dir=f"/root/pkg/.calib/{tag}")
print(f"[{tag}] trained {(time.time()-t0)/60:.1f} min; best {res.best_heldout_return:.3f} final {res.final_heldout_return:.3f}")

cfg_eval = harness.ExperimentConfig(
    domain="synthetic", d=4, n0=20, budget=8, expected_in_degree=0.75,
    policies=("caasl-checkpoint", "random"),
    policy_checkpoint=f"/root/pkg/.calib/{tag}/policy.ckpt",
    n_test_envs=100)
rep = harness.evaluate(cfg_eval, posterior=post)
ca = rep.per_env_returns("caasl-checkpoint"); rnd = rep.per_env_returns("random")
t_stat, p_val = stats.ttest_rel(ca, rnd)
print(f"[{tag}] caasl {ca.mean():.3f} vs random {rnd.mean():.3f}; t={t_stat:.2f} p={p_val:.2e}")
