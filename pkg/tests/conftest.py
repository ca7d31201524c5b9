import numpy as np
import pytest

from streamtts.network import LayerSpec, NetworkSpec, init_weights

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_spec(input_dim=3, frame_dim=2, k=1, cells=4, proj=3, relu=5, out="linear_recurrent"):
    layers = []
    if relu:
        layers.append(LayerSpec("relu", relu))
    layers.append(LayerSpec("lstmp" if proj else "lstm", cells, proj))
    layers.append(LayerSpec(out, frame_dim * k))
    return NetworkSpec(input_dim, tuple(layers), k, frame_dim)


def tiny_network(seed=0, dtype=np.float32, scale=0.5, **kw):
    spec = tiny_spec(**kw)
    return spec, init_weights(spec, seed, scale=scale, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
