"""Pilot 3: committed exploration (low log_std init), faster lrs, longer run."""
import time
import numpy as np, torch
from scipy import stats
from caasl import harness, posterior as P, rl
from caasl.env import EnvConfig
from caasl.nets import AltAttentionConfig
from caasl.priors import PriorSpec
from caasl.scm import GraphPrior

torch.set_num_threads(1)
post = P.load_posterior("/root/pkg/.calib/posterior_d4.ckpt")
prior = PriorSpec(domain="synthetic", d=4, graph=GraphPrior("erdos-renyi", 0.75))
env_cfg = EnvConfig(domain="synthetic", d=4, n0=20, budget=8)

sac = rl.SacConfig(
    m_critics=2, gamma=0.9, batch_size=32,
    policy_lr=1e-3, q_lr=3e-3, alpha_lr=1e-2, init_alpha=0.05,
    target_entropy=-16.0,
    n_env_steps=5000, update_after=200, eval_every=500, n_eval_envs=8,
    arch=AltAttentionConfig(num_layers=1, dropout=0.1),
    q_arch=AltAttentionConfig(num_layers=1))
t0 = time.time()
res = rl.train(sac, env_cfg, prior, post, seed=7, out_dir="/root/pkg/.calib/pilot3")
print(f"trained {(time.time()-t0)/60:.1f} min; best {res.best_heldout_return:.3f} final {res.final_heldout_return:.3f}")
evs = [r["heldout_return"] for r in res.log_rows[::400]]
print("heldout trajectory:", [f"{v:.3f}" for v in evs])

for stoch in (False, True):
    cfg_eval = harness.ExperimentConfig(
        domain="synthetic", d=4, n0=20, budget=8, expected_in_degree=0.75,
        policies=("caasl-checkpoint", "random"),
        policy_checkpoint="/root/pkg/.calib/pilot3/policy.ckpt",
        stochastic_rollout=stoch, n_test_envs=100)
    rep = harness.evaluate(cfg_eval, posterior=post)
    ca = rep.per_env_returns("caasl-checkpoint"); rnd = rep.per_env_returns("random")
    t_stat, p_val = stats.ttest_rel(ca, rnd)
    mode = "stochastic" if stoch else "mean-act"
    print(f"[{mode}] caasl {ca.mean():.3f}+-{1.96*ca.std(ddof=1)/10:.3f} vs "
          f"random {rnd.mean():.3f}+-{1.96*rnd.std(ddof=1)/10:.3f}; t={t_stat:.2f} p={p_val:.2e}")
