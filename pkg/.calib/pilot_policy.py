"""Pilot: can desk-scale SAC beat random on paired test envs?"""
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

# Baseline headroom: random vs observational on 40 paired envs
cfg_base = harness.ExperimentConfig(
    domain="synthetic", d=4, n0=20, budget=8, expected_in_degree=0.75,
    n_test_envs=40)
t0 = time.time()
rep = harness.evaluate(cfg_base, posterior=post)
rnd = rep.per_env_returns("random"); obs = rep.per_env_returns("observational")
print(f"[{time.time()-t0:.0f}s] random {rnd.mean():.3f}+-{rnd.std()/np.sqrt(len(rnd)):.3f} "
      f"vs observational {obs.mean():.3f}+-{obs.std()/np.sqrt(len(obs)):.3f}")

sac = rl.SacConfig(
    m_critics=2, gamma=0.9, batch_size=32,
    policy_lr=1e-3, q_lr=1e-3, alpha_lr=3e-3,
    n_env_steps=2000, update_after=256, eval_every=400, n_eval_envs=8,
    arch=AltAttentionConfig(num_layers=1, dropout=0.1),
    q_arch=AltAttentionConfig(num_layers=1))
t0 = time.time()
res = rl.train(sac, env_cfg, prior, post, seed=7, out_dir="/root/pkg/.calib/pilot_policy")
print(f"policy trained in {(time.time()-t0)/60:.1f} min; "
      f"best heldout {res.best_heldout_return:.3f}, final {res.final_heldout_return:.3f}")

cfg_eval = harness.ExperimentConfig(
    domain="synthetic", d=4, n0=20, budget=8, expected_in_degree=0.75,
    policies=("caasl-checkpoint", "random"),
    policy_checkpoint="/root/pkg/.calib/pilot_policy/policy.ckpt",
    n_test_envs=100)
t0 = time.time()
rep = harness.evaluate(cfg_eval, posterior=post)
ca = rep.per_env_returns("caasl-checkpoint"); rnd = rep.per_env_returns("random")
t_stat, p_val = stats.ttest_rel(ca, rnd)
print(f"[eval {time.time()-t0:.0f}s] caasl {ca.mean():.3f}+-{1.96*ca.std(ddof=1)/10:.3f} "
      f"vs random {rnd.mean():.3f}+-{1.96*rnd.std(ddof=1)/10:.3f}; "
      f"paired t={t_stat:.2f} p={p_val:.2e}")
