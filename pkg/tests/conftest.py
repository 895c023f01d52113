import numpy as np
import pytest
import torch

from geega.model import GEEGA, EncoderConfig, GcnConfig, ModelConfig


def tiny_config(spectro_channels=4, use_topo=True, use_spectro=True, dropout=0.0):
    branches = int(use_topo) + int(use_spectro)
    return ModelConfig(
        encoder=EncoderConfig(blocks=1, heads=2, embed_dim=16, mlp_hidden=32, dropout=dropout),
        gcn=GcnConfig(g1=16 * branches, g2=16, nodes=2, node_dim=8, out_dim=8, dropout=dropout),
        head_hidden=16, fc_dropout=dropout, spectro_channels=spectro_channels,
        use_topo=use_topo, use_spectro=use_spectro,
    )


def tiny_model(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    return GEEGA(tiny_config(**kw)).to(dtype).eval()


def tiny_batch(seed=0, b=4, c=4, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    topo = torch.randn(b, 5, 32, 32, generator=g, dtype=dtype)
    spectro = torch.randn(b, c, 32, 32, generator=g, dtype=dtype)
    labels = torch.tensor([i % 2 for i in range(b)])
    return topo, spectro, labels


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
