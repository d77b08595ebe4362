import numpy as np
import pytest
import torch

from caasl import numerics
from caasl.errors import NumericalError
from caasl.nets import AltAttentionConfig, SelfAttentionBlock


def test_softmax_of_zeros_is_uniform():
    out = numerics.softmax(torch.tensor([0.0, 0.0]))
    assert torch.allclose(out, torch.tensor([0.5, 0.5]))


def test_layer_norm_of_constant_vector_is_zero():
    out = numerics.layer_norm(torch.full((6,), 3.7))
    assert out.abs().max() < 1e-5


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((3, 4))
    expected = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    out = numerics.matmul(torch.from_numpy(a), torch.from_numpy(b))
    assert out.shape == (2, 4)
    assert np.abs(out.numpy() - expected).max() < 1e-6


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(RuntimeError, match="2x3|3x4"):
        numerics.matmul(torch.zeros(2, 3), torch.zeros(4, 5))


def test_dropout_train_eval_split():
    x = torch.ones(10_000)
    dropped = numerics.dropout(x, p=0.1, training=True)
    assert abs((dropped == 0).float().mean().item() - 0.1) < 0.02
    assert torch.equal(numerics.dropout(x, p=0.1, training=False), x)


def test_simple_square_gradient():
    x = torch.tensor(3.0, requires_grad=True)
    grads = numerics.gradients(x**2, {"x": x})
    assert torch.allclose(grads["x"], torch.tensor(6.0))


def test_unused_parameters_get_zero_gradients():
    x = torch.tensor(2.0, requires_grad=True)
    unused = torch.zeros(3, requires_grad=True)
    grads = numerics.gradients(x * 4, {"x": x, "unused": unused})
    assert torch.equal(grads["unused"], torch.zeros(3))


def test_backward_through_unrecorded_tensor_fails():
    x = torch.tensor(1.0, requires_grad=True)
    loose = torch.tensor(5.0, requires_grad=True)
    with pytest.raises(RuntimeError):
        numerics.gradients((x * 2).detach() * 3, {"x": x, "loose": loose})


def test_tanh_layer_gradient_matches_finite_differences():
    torch.manual_seed(0)
    w = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, dtype=torch.float64)
    err = numerics.finite_difference_max_rel_error(
        lambda: torch.tanh(w @ x).sum(), {"w": w}, h=1e-3, max_coords_per_tensor=16
    )
    assert err < 1e-4


def test_alternating_attention_block_gradient():
    # One attention block on a (3 samples x 2 variables x 2 channels) input,
    # checked against central differences in float64.
    torch.manual_seed(1)
    cfg = AltAttentionConfig(num_layers=1, num_heads=2, embed_dim=8)
    block = SelfAttentionBlock(cfg).double()
    embed = torch.nn.Linear(2, 8).double()
    x = torch.randn(3, 2, 2, dtype=torch.float64)

    def loss_fn():
        z = embed(x)  # (samples, variables, embed)
        z = block(z.permute(1, 0, 2))  # variables as batch, samples as sequence
        return z.sum()

    params = {**numerics.module_params(block, "block/"),
              **numerics.module_params(embed, "embed/")}
    err = numerics.finite_difference_max_rel_error(loss_fn, params, max_coords_per_tensor=6)
    assert err < 1e-3


def test_adam_zero_gradient_keeps_parameters():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = numerics.Adam({"p": p}, lr=0.1)
    opt.step({"p": torch.zeros(2)})
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))
    assert opt.step_count == 1


def test_adam_first_step_is_signed_learning_rate():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5]))
    opt = numerics.Adam({"p": p}, lr=0.05)
    opt.step({"p": torch.tensor([0.3, -0.7, 1e-3])})
    update = p.detach() - torch.tensor([1.0, -2.0, 0.5])
    assert torch.allclose(update, -0.05 * torch.sign(torch.tensor([0.3, -0.7, 1e-3])),
                          atol=1e-4)


def test_adam_nan_gradient_aborts_with_name():
    p = torch.nn.Parameter(torch.ones(2))
    opt = numerics.Adam({"layer/weight": p}, lr=0.1)
    with pytest.raises(NumericalError, match="layer/weight"):
        opt.step({"layer/weight": torch.tensor([float("nan"), 0.0])})


def test_adam_determinism_over_100_steps():
    def run():
        torch.manual_seed(42)
        w = torch.nn.Parameter(torch.randn(8, 8))
        opt = numerics.Adam({"w": w}, lr=1e-2)
        x = torch.randn(8)
        for _ in range(100):
            loss = (torch.tanh(w @ x) ** 2).sum()
            opt.step(numerics.gradients(loss, {"w": w}))
        return w.detach().numpy().tobytes()

    assert run() == run()


def test_checkpoint_roundtrip_and_magic(tmp_path):
    path = tmp_path / "params.ckpt"
    tensors = {
        "policy/weight": torch.randn(3, 4),
        "q0/bias": np.arange(5, dtype=np.int64),
    }
    numerics.save_checkpoint(path, tensors)
    with open(path, "rb") as fh:
        assert fh.read(6) == b"CAASL1"
    loaded = numerics.load_checkpoint(path)
    assert np.allclose(loaded["policy/weight"], tensors["policy/weight"].numpy())
    assert np.array_equal(loaded["q0/bias"], tensors["q0/bias"])
    assert loaded["policy/weight"].dtype == np.float32

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        numerics.load_checkpoint(bad)


def test_checkpoint_float64_downcast_to_storage_dtype(tmp_path):
    path = tmp_path / "p.ckpt"
    numerics.save_checkpoint(path, {"x": np.array([1.0, 2.0], dtype=np.float64)})
    assert numerics.load_checkpoint(path)["x"].dtype == np.float32


def test_module_params_roundtrip():
    torch.manual_seed(3)
    src = torch.nn.Linear(4, 2)
    dst = torch.nn.Linear(4, 2)
    tensors = {k: v.detach().numpy() for k, v in numerics.module_params(src, "m/").items()}
    numerics.load_module_params(dst, tensors, "m/")
    for a, b in zip(src.parameters(), dst.parameters()):
        assert torch.allclose(a, b)
