import numpy as np
import pytest

from uav_ssl import numcore as nc
from uav_ssl.errors import DimensionError, EmptyPoolError, GeometryError
from uav_ssl.losses import LossConfig
from uav_ssl.masking import MaskPlan
from uav_ssl.model import (
    ModelConfig, count_parameters, encode, init_state, joint_decode, joint_encode, load_checkpoint,
    param_shapes, parameter_report, pool_embedding, save_checkpoint,
)
from uav_ssl.numcore import RngStream, Tensor
from uav_ssl.trainer import forward_losses

from conftest import toy_batch, toy_config, toy_plan


def test_shared_parameter_audit(toy_state):
    ta, tv = toy_batch(toy_state.config, 2)
    with toy_state.trace() as log_a:
        encode(ta, "audio", toy_state)
    with toy_state.trace() as log_v:
        encode(tv, "visual", toy_state)
    shared = set(toy_state.names("shared"))
    ids_a = {(n, i) for n, i in log_a if n in shared}
    ids_v = {(n, i) for n, i in log_v if n in shared}
    assert ids_a == ids_v
    assert {n for n, _ in ids_a} == shared
    # positional tables are the only modality-specific lookups
    assert {n for n, _ in log_a} - shared == {"pos.audio"}
    assert {n for n, _ in log_v} - shared == {"pos.visual"}


def test_depth_zero_is_projection_plus_position():
    cfg = toy_config(depth=0)
    st = init_state(cfg, RngStream(1), dtype=np.float64)
    ta, _ = toy_batch(cfg, 1)
    idx = np.array([3, 1])
    out = encode(ta[0, idx], "audio", st, idx).data
    expect = ta[0, idx] @ st["patch_embed.w"].data + st["patch_embed.b"].data + st["pos.audio"].data[idx]
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-14)


def test_encode_permutation_equivariance(toy_state):
    cfg = toy_state.config
    ta, _ = toy_batch(cfg, 1, seed=3)
    idx = np.array([0, 2, 3])
    perm = np.array([2, 0, 1])
    a = encode(ta[0, idx], "audio", toy_state, idx).data
    b = encode(ta[0, idx[perm]], "audio", toy_state, idx[perm]).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_encode_index_out_of_range(toy_state):
    ta, _ = toy_batch(toy_state.config, 1)
    with pytest.raises(GeometryError):
        encode(ta[0, :2], "audio", toy_state, np.array([0, 4]))


def test_pool_embedding():
    f = Tensor(np.array([[1.0, -2.0, 0.5]]))
    e = pool_embedding(f, "audio")
    np.testing.assert_array_equal(e.values, [1.0, -2.0, 0.5])
    assert e.modality == "audio"
    dup = Tensor(np.array([[1.0, -2.0, 0.5]] * 4))
    np.testing.assert_array_equal(pool_embedding(dup, "visual").values, e.values)
    x = Tensor(np.random.default_rng(0).standard_normal((5, 4)).astype(np.float32))
    assert pool_embedding(x, "visual").values.tobytes() == nc.mean_pool(x).data.tobytes()
    with pytest.raises(EmptyPoolError):
        pool_embedding(Tensor(np.zeros((0, 4))), "audio")


def test_joint_encode_length_and_type_ablation(toy_state):
    st = toy_state.copy()
    gen = np.random.default_rng(4)
    fa = Tensor(gen.standard_normal((2, 3, 8)))
    fv = Tensor(gen.standard_normal((2, 2, 8)))
    out = joint_encode(fa, fv, st, np.array([[0, 1, 2]] * 2), np.array([[1, 3]] * 2))
    assert out.shape == (2, 5, 8)

    st.params["joint.type.audio"].data[:] = 0
    st.params["joint.type.visual"].data[:] = 0
    st.params["joint.pos.visual"].data[:] = st.params["joint.pos.audio"].data
    same = Tensor(gen.standard_normal((1, 2, 8)))
    idx = np.array([[0, 2]])
    out = joint_encode(same, same, st, idx, idx).data
    np.testing.assert_allclose(out[0, :2], out[0, 2:], atol=1e-12)


def test_joint_encode_width_mismatch(toy_state):
    with pytest.raises(DimensionError):
        joint_encode(Tensor(np.zeros((1, 2, 6))), Tensor(np.zeros((1, 2, 6))), toy_state)


def test_type_embeddings_receive_gradient(toy_state):
    gen = np.random.default_rng(5)
    fa = Tensor(gen.standard_normal((2, 2, 8)))
    fv = Tensor(gen.standard_normal((2, 3, 8)))
    w = gen.standard_normal((2, 5, 8))
    (joint_encode(fa, fv, toy_state, np.array([[0, 1]] * 2), np.array([[0, 1, 2]] * 2)) * w).sum().backward()
    for name in ("joint.type.audio", "joint.type.visual"):
        assert np.abs(toy_state[name].grad).max() > 0


def _joint_for(plan, state, seed=0):
    gen = np.random.default_rng(seed)
    nu, mu = plan.kept_audio.shape[1], plan.kept_visual.shape[1]
    return Tensor(gen.standard_normal((plan.batch_size, nu + mu, state.config.dim)))


def test_joint_decode_shapes(toy_state):
    cfg = toy_state.config
    plan = toy_plan(cfg, 3)
    ra, rv = joint_decode(_joint_for(plan, toy_state), plan, toy_state)
    assert ra.shape == (3, cfg.num_audio, cfg.token_dim)
    assert rv.shape == (3, cfg.num_visual, cfg.token_dim)


def test_joint_decode_one_kept_token(toy_state):
    cfg = toy_state.config
    plan = MaskPlan(0.75, 0.75, np.array([[0, 1, 3]]), np.array([[2]]), np.array([[1, 2, 3]]), np.array([[0]]))
    ra, rv = joint_decode(_joint_for(plan, toy_state), plan, toy_state)
    assert ra.shape == (1, 4, cfg.token_dim) and rv.shape == (1, 4, cfg.token_dim)
    assert np.all(np.isfinite(ra.data)) and np.all(np.isfinite(rv.data))


def test_joint_decode_uses_mask_token(toy_state):
    p1 = MaskPlan(0.5, 0.5, np.array([[0, 1]]), np.array([[2, 3]]), np.array([[0, 1]]), np.array([[2, 3]]))
    p2 = MaskPlan(0.5, 0.5, np.array([[2, 3]]), np.array([[0, 1]]), np.array([[2, 3]]), np.array([[0, 1]]))
    joint = _joint_for(p1, toy_state)
    r1 = joint_decode(joint, p1, toy_state)[0].data
    r2 = joint_decode(joint, p2, toy_state)[0].data
    assert not np.allclose(r1, r2)


def test_joint_decode_plan_inconsistent(toy_state):
    plan = toy_plan(toy_state.config, 2)
    bad = Tensor(np.zeros((2, 7, 8)))
    with pytest.raises(GeometryError):
        joint_decode(bad, plan, toy_state)


def test_count_parameters_dual_vs_shared(toy_state):
    shared = count_parameters(toy_state, "shared")
    dual = count_parameters(toy_state, "dual-hypothetical")
    backbone = sum(toy_state[n].size for n in toy_state.names("shared"))
    assert dual == shared + backbone
    assert shared < dual
    assert count_parameters(toy_state.config) == shared
    rep = parameter_report(toy_state)
    assert rep["shared_count"] == shared and rep["dual_count"] == dual


def test_count_parameters_depth_zero_hand_count():
    cfg = toy_config(depth=0, joint_encoder_depth=0, joint_decoder_depth=0)
    st = init_state(cfg, RngStream(0))
    d, dd, k, n, m = 8, 8, 12, 4, 4
    hand = (
        k * d + d  # patch projection
        + n * d + m * d  # backbone positions
        + 2 * d + n * d + m * d  # joint type + joint positions
        + 2 * d  # joint norm
        + d * dd + dd + dd  # decoder adapter + mask token
        + n * dd + m * dd + 2 * dd  # decoder positions + types
        + 2 * dd  # decoder norm
        + dd * k + k  # output head
    )
    assert count_parameters(st) == hand
    assert count_parameters(st) == count_parameters(init_state(cfg, RngStream(9)))


def test_vit_b_shaped_count_halves_backbone():
    cfg = ModelConfig(dim=768, depth=12, heads=12, patch_size=16, grid_visual=(14, 14), grid_audio=(14, 14),
                      decoder_dim=512, decoder_heads=16)
    rep = parameter_report(cfg)
    # a ViT-B backbone plus patch projection is ~85M scalars
    assert 84e6 < rep["backbone_projection_count"] < 86e6
    assert rep["dual_count"] - rep["shared_count"] == rep["backbone_projection_count"]


def test_all_parameters_get_finite_gradients(toy_state):
    cfg = toy_state.config
    ta, tv = toy_batch(cfg, 3)
    plan = toy_plan(cfg, 3)
    loss, _, _ = forward_losses(toy_state, ta, tv, plan, LossConfig(tau=0.5, lam=0.3))
    loss.backward()
    for name, p in toy_state.params.items():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


def test_init_is_deterministic():
    a = init_state(toy_config(), RngStream(5))
    b = init_state(toy_config(), RngStream(5))
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.params)
    assert list(a.params) == list(param_shapes(toy_config()))


def test_checkpoint_round_trip_bytes(tmp_path):
    st = init_state(toy_config(), RngStream(2))
    save_checkpoint(tmp_path / "a.uavc", st, {"step": 3, "note": [1.5, "x"]}, {"opt.m/x": np.arange(3.0)})
    st2, meta, extra = load_checkpoint(tmp_path / "a.uavc")
    assert meta == {"step": 3, "note": [1.5, "x"]}
    np.testing.assert_array_equal(extra["opt.m/x"], [0.0, 1.0, 2.0])
    save_checkpoint(tmp_path / "b.uavc", st2, meta, extra)
    assert (tmp_path / "a.uavc").read_bytes() == (tmp_path / "b.uavc").read_bytes()
    assert st2.config == st.config


def test_stripped_checkpoint_smaller(tmp_path):
    st = init_state(toy_config(), RngStream(2))
    save_checkpoint(tmp_path / "full.uavc", st)
    save_checkpoint(tmp_path / "inf.uavc", st.strip())
    assert (tmp_path / "inf.uavc").stat().st_size < (tmp_path / "full.uavc").stat().st_size
    inf, _, _ = load_checkpoint(tmp_path / "inf.uavc")
    assert inf.is_inference_only and not st.is_inference_only
