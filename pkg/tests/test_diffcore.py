import math

import numpy as np
import pytest
import torch
from torch import nn

from geega import diffcore
from geega.diffcore import ContractError
from oracles import central_difference, rel_err


def test_quadratic_gradient():
    w = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
    g = diffcore.backward((w * w).sum(), [w])
    assert g.tolist() == [2.0, 4.0, 6.0]


def test_unreached_subset_is_zero():
    w = torch.ones(3, requires_grad=True)
    v = torch.ones(2, requires_grad=True)
    g = diffcore.backward((w * 2).sum(), [v])
    assert g.tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar():
    w = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        diffcore.backward(w * 2, [w])


@pytest.mark.parametrize("seed", range(3))
def test_mlp_matches_finite_differences(seed):
    torch.manual_seed(seed)
    mlp = nn.Sequential(nn.Linear(5, 7), nn.Tanh(), nn.Linear(7, 6), nn.Sigmoid(), nn.Linear(6, 1)).double()
    x = torch.randn(8, 5, dtype=torch.float64)
    params = list(mlp.parameters())
    fn = lambda: mlp(x).pow(2).sum()  # noqa: E731
    analytic = diffcore.backward(fn(), params).numpy()
    numeric = central_difference(fn, params, eps=1e-4)
    assert rel_err(analytic, numeric) < 1e-5


PRIMITIVES = {
    "matmul": lambda a, b: (a @ b).sum(),
    "softmax": lambda a, b: (a.softmax(-1) * b).sum(),
    "layer_norm": lambda a, b: (torch.nn.functional.layer_norm(a, a.shape[-1:]) * b).sum(),
    "relu": lambda a, b: (torch.relu(a) * b).sum(),
    "sigmoid": lambda a, b: (torch.sigmoid(a) * b).sum(),
    "dropout_eval": lambda a, b: (torch.nn.functional.dropout(a, 0.5, training=False) * b).sum(),
    "mean": lambda a, b: (a * b).mean(),
    "concat": lambda a, b: torch.cat([a, b], 0).pow(2).sum(),
    "reshape": lambda a, b: (a.reshape(-1) * b.reshape(-1)).sum(),
    "gelu": lambda a, b: (torch.nn.functional.gelu(a) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    g = torch.Generator().manual_seed(1)
    a = torch.randn(4, 4, generator=g, dtype=torch.float64)
    # keep ReLU inputs away from the kink
    a = torch.where(a.abs() < 0.1, a + 0.3, a).requires_grad_(True)
    b = torch.randn(4, 4, generator=g, dtype=torch.float64).requires_grad_(True)
    fn = lambda: PRIMITIVES[name](a, b)  # noqa: E731
    analytic = diffcore.backward(fn(), [a, b]).numpy()
    numeric = central_difference(fn, [a, b], eps=1e-6)
    assert rel_err(analytic, numeric) < 1e-5


def test_backward_linearity():
    torch.manual_seed(0)
    lin = nn.Linear(4, 3).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    params = list(lin.parameters())
    l1 = lin(x).pow(2).sum()
    l2 = lin(x).sin().sum()
    lhs = diffcore.backward(l1 + l2, params)
    rhs = diffcore.backward(l1, params) + diffcore.backward(l2, params)
    assert torch.max(torch.abs(lhs - rhs)) < 1e-10


def test_flatten_unflatten_round_trip():
    ps = [torch.randn(2, 3), torch.randn(4), torch.randn(1, 1, 2)]
    vec = diffcore.flatten(ps)
    back = diffcore.unflatten(vec, ps)
    assert all(torch.equal(a, b) for a, b in zip(ps, back))
    with pytest.raises(ContractError):
        diffcore.unflatten(vec[:-1], ps)


def test_adam_first_step():
    p = nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
    opt = torch.optim.AdamW([p], lr=1e-4, betas=(0.9, 0.999), weight_decay=0.0)
    diffcore.adam_step([p], [torch.tensor([1.0], dtype=torch.float64)], opt)
    assert p.item() - 0.5 == pytest.approx(-1e-4, rel=1e-6)


def test_adam_zero_grad_no_decay_is_noop():
    p = nn.Parameter(torch.tensor([0.5, -2.0]))
    opt = torch.optim.AdamW([p], lr=1e-3, weight_decay=0.0)
    diffcore.adam_step([p], [torch.zeros(2)], opt)
    assert p.tolist() == [0.5, -2.0]


def test_adam_shape_mismatch():
    p = nn.Parameter(torch.zeros(3))
    opt = torch.optim.AdamW([p])
    with pytest.raises(ContractError):
        diffcore.adam_step([p], [torch.zeros(2)], opt)


def test_adam_deterministic():
    def run():
        torch.manual_seed(0)
        lin = nn.Linear(3, 2)
        opt = diffcore.make_optimizer(lin, lr=1e-2)
        x = torch.randn(4, 3)
        for _ in range(5):
            ps = list(lin.parameters())
            diffcore.adam_step(ps, torch.autograd.grad(lin(x).pow(2).sum(), ps), opt)
        return diffcore.flatten(lin.parameters())
    assert torch.equal(run(), run())


def test_optimizer_excludes_bias_from_decay():
    opt = diffcore.make_optimizer(nn.Linear(3, 2), weight_decay=1e-5)
    assert sorted(g["weight_decay"] for g in opt.param_groups) == [0.0, 1e-5]
    bias_group = [g for g in opt.param_groups if g["params"][0].dim() == 1][0]
    assert bias_group["weight_decay"] == 0.0


def test_lr_schedule_warmup():
    assert diffcore.lr_schedule(0) == pytest.approx(0.2)
    assert diffcore.lr_schedule(4) == pytest.approx(1.0)
    assert [diffcore.lr_schedule(e) for e in range(5)] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])


def test_lr_schedule_plateau():
    # best value reached during warmup; epochs 5..9 fail to improve
    history = [5, 4, 3, 2, 1] + [1.5] * 5
    assert diffcore.lr_schedule(9, history[:9]) == 1.0
    assert diffcore.lr_schedule(10, history) == pytest.approx(0.1)
    history += [1.5] * 5
    assert diffcore.lr_schedule(15, history) == pytest.approx(0.01)


def test_lr_schedule_improving_stays_one():
    history = [10.0 - 0.1 * e for e in range(40)]
    assert all(diffcore.lr_schedule(e, history[:e]) == 1.0 for e in range(5, 41))


def test_lr_schedule_recovers_count_on_improvement():
    history = [5, 4, 3, 2, 1, 1.2, 1.2, 1.2, 1.2, 0.5, 1.0, 1.0, 1.0, 1.0]
    assert diffcore.lr_schedule(14, history) == 1.0


def test_checkpoint_round_trip(tmp_path):
    from conftest import tiny_model
    a = tiny_model(0, dtype=torch.float32)
    b = tiny_model(1, dtype=torch.float32)
    diffcore.save_checkpoint(a, tmp_path / "c.geec", meta={"k": 1})
    box = diffcore.load_checkpoint(b, tmp_path / "c.geec")
    assert box.meta["k"] == 1
    for (n1, t1), (n2, t2) in zip(a.state_dict().items(), b.state_dict().items()):
        assert n1 == n2 and torch.equal(t1, t2)
    order_a = [n for n, _ in a.named_parameters()]
    order_b = [n for n, _ in b.named_parameters()]
    assert order_a == order_b
    assert torch.equal(diffcore.flatten(a.parameters()), diffcore.flatten(b.parameters()))


def test_parameter_groups_cover_components():
    from conftest import tiny_model
    groups = diffcore.parameter_groups(tiny_model())
    assert list(groups) == ["T_topo", "head_topo", "T_spectro", "head_spectro", "GCN", "head_GCN"]
    total = sum(p.numel() for ps in groups.values() for _, p in ps)
    assert total == sum(p.numel() for p in tiny_model().parameters())
