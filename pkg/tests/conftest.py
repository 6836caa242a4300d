import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alignlab.encoder import EncoderConfig
from alignlab.models import ModelConfig, build_model


def micro_model_cfg(vocab_size=5, **enc_kw):
    enc = dict(num_layers=2, model_dim=16, num_heads=2, ffn_mult=2,
               conv1d_kernel=3, subsample_layers=1, subsample_channels=4,
               feature_dim=4)
    enc.update(enc_kw)
    return ModelConfig(vocab_size=vocab_size, encoder=EncoderConfig(**enc),
                       embed_dim=8, pred_hidden=12, joint_dim=12)


@pytest.fixture
def micro_aligner():
    return build_model("aligner", micro_model_cfg(), np.random.default_rng(1234))


@pytest.fixture
def micro_rnnt():
    return build_model("rnnt", micro_model_cfg(), np.random.default_rng(1234))
