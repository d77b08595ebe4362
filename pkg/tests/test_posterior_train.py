import math

import numpy as np
import pytest
import torch

from caasl import posterior as P
from caasl.errors import NumericalError
from caasl.nets import AltAttentionConfig, PosteriorNet, edge_probabilities
from caasl.priors import PriorSpec
from caasl.scm import GraphPrior

D2_PRIOR = PriorSpec(domain="synthetic", d=2, graph=GraphPrior("erdos-renyi", 0.5))


def d2_config(steps):
    # Heavy do-interventions on a 2-variable system: orientation is learnable
    # only from the interventional rows.
    return P.PosteriorTrainConfig(
        prior=D2_PRIOR,
        n_range=(12, 24),
        interventional_fraction=(0.5, 0.9),
        datasets_per_batch=8,
        steps=steps,
        lr=1e-3,
        arch=AltAttentionConfig(num_layers=1, num_heads=4, embed_dim=16),
    )


@pytest.fixture(scope="module")
def trained_d2():
    cfg = d2_config(steps=5000)
    net, log = P.train_posterior(cfg, seed=0)
    return cfg, net, log


def test_untrained_zero_head_loss_is_uniform_entropy():
    torch.manual_seed(0)
    net = PosteriorNet(AltAttentionConfig(num_layers=1))
    with torch.no_grad():
        for proj in (net.source_proj, net.target_proj):
            proj.weight.zero_()
            proj.bias.zero_()
    d = 4
    h = torch.randn(3, 10, d, 2)
    truth = torch.zeros(3, d, d)
    loss = P.negative_log_likelihood(net.edge_logits(h), truth)
    assert loss.item() == pytest.approx(d * (d - 1) * math.log(2), rel=1e-5)


def test_training_loss_decreases(trained_d2):
    _, _, log = trained_d2
    losses = [v for _, v in log]
    start = np.mean(losses[:100])
    end = np.mean(losses[-100:])
    assert end < start


def test_heldout_edge_accuracy_above_090(trained_d2):
    cfg, net, _ = trained_d2
    accuracy = P.held_out_edge_accuracy(net, cfg, n_models=200, seed=9)
    assert accuracy > 0.9


def test_trained_posterior_orients_edges_from_interventions(trained_d2):
    # A do-intervened variable that keeps tracking the other one is downstream;
    # the trained posterior should say so.
    cfg, net, _ = trained_d2
    rng = np.random.default_rng(1)
    h, truth = P.simulate_training_dataset(cfg, 2, 24, model_seed=77, rng=rng)
    probs = edge_probabilities(net, h)
    off = ~np.eye(2, dtype=bool)
    assert ((probs > 0.5) == (truth == 1))[off].all()


def test_divergence_aborts_with_step_index():
    cfg = d2_config(steps=3)
    net_holder = {}

    original_init = PosteriorNet.__init__

    def broken_init(self, arch):
        original_init(self, arch)
        with torch.no_grad():
            self.source_proj.weight.fill_(float("inf"))
        net_holder["net"] = self

    PosteriorNet.__init__ = broken_init
    try:
        with pytest.raises(NumericalError, match="step 0"):
            P.train_posterior(cfg, seed=0)
    finally:
        PosteriorNet.__init__ = original_init


def test_simulated_dataset_layout():
    cfg = d2_config(steps=1)
    rng = np.random.default_rng(2)
    h, truth = P.simulate_training_dataset(cfg, 2, 16, model_seed=3, rng=rng)
    assert h.shape == (16, 2, 2)
    assert truth.shape == (2, 2)
    indicators = h[:, :, 1]
    n_int = int((indicators.sum(axis=1) > 0).sum())
    assert 1 <= n_int <= 15  # at least one observational row is kept
    assert np.all(indicators.sum(axis=1) <= 1)  # single-target interventions


def test_posterior_checkpoint_roundtrip(tmp_path, trained_d2):
    _, net, _ = trained_d2
    path = tmp_path / "posterior.ckpt"
    P.save_posterior(net, path)
    loaded = P.load_posterior(path)
    assert not loaded.training
    assert all(not p.requires_grad for p in loaded.parameters())
    h = np.random.default_rng(3).standard_normal((10, 2, 2)).astype(np.float32)
    a = edge_probabilities(net, h)
    b = edge_probabilities(loaded, h)
    assert np.allclose(a, b, atol=1e-6)
