import numpy as np
import pytest

from uav_ssl.masking import MaskConfig, make_plan
from uav_ssl.model import ModelConfig, init_state
from uav_ssl.numcore import RngStream


def toy_config(**kw) -> ModelConfig:
    base = dict(dim=8, depth=2, heads=2, mlp_ratio=2, patch_size=2, grid_visual=(2, 2), grid_audio=(2, 2),
                joint_encoder_depth=2, joint_decoder_depth=6, decoder_dim=8, decoder_heads=2)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(cfg: ModelConfig, b: int, seed: int = 0):
    gen = np.random.default_rng(seed)
    ta = gen.standard_normal((b, cfg.num_audio, cfg.token_dim))
    tv = gen.standard_normal((b, cfg.num_visual, cfg.token_dim))
    return ta, tv


def toy_plan(cfg: ModelConfig, b: int, seed: int = 0):
    root = RngStream(seed)
    return make_plan(b, cfg.num_audio, cfg.num_visual, MaskConfig(), root.child("r"), root.child("i"))


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_state(toy_cfg):
    return init_state(toy_cfg, RngStream(0).child("init"), dtype=np.float64)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = 9


def pytest_terminal_summary(terminalreporter):
    ran = [k for k in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
           if "test_acceptance" in k.nodeid]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
