import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vguide.labelers import find_yosys
from vguide.model import ModelConfig, ModelParameters
from vguide.tokenizer import build_vocab

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = Path(__file__).parent / "fixtures"

HAS_YOSYS = find_yosys() is not None
needs_yosys = pytest.mark.skipif(not HAS_YOSYS, reason="yosys not installed")


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def d_latch_text():
    return (FIXTURES / "d_latch.v").read_text()


@pytest.fixture(scope="session")
def small_vocab():
    texts = [
        "module m(input a, output y); assign y = a; endmodule",
        "always @(posedge clk) q <= d;",
        "assign y = a & b;",
    ] * 3
    return build_vocab(texts, 300)


@pytest.fixture(scope="session")
def tiny_config(small_vocab):
    return ModelConfig(vocab_size=small_vocab.size, context_length=32, embed_dim=16,
                       num_layers=2, num_heads=2, seed=3)


@pytest.fixture
def tiny_params(tiny_config):
    return ModelParameters.init(tiny_config)


def perturbed(params, scale=0.3, seed=0):
    """Copy with every tensor jittered, so tests leave the symmetric initialization."""
    rng = np.random.default_rng(seed)
    out = params.copy()
    for name, arr in out.tensors.items():
        out.tensors[name] = arr + scale * rng.standard_normal(arr.shape)
    return out
