import dataclasses

import numpy as np
import pytest

from splitmask import numerics as nx
from splitmask.errors import ConfigError, ConfigMismatchError, UsageError
from splitmask.masking import MaskPlan, make_plans
from splitmask.model import Model, ModelConfig, decays, load_checkpoint, param_count, save_checkpoint

SMALL = ModelConfig(image_size=16, patch_size=4, embed_dim=16, encoder_depth=2, decoder_depth=1,
                    num_heads=2, vocab_size=10)


def patches_for(cfg, batch=2, seed=0):
    return np.random.default_rng(seed).random((batch, cfg.n, cfg.patch_dim)).astype(np.float32)


def half_plans(cfg, batch=2, seed=0):
    return make_plans("uniform", batch, cfg.grid, 0.5, np.random.default_rng(seed))


# --- configuration and parameters -------------------------------------------------


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(decoder_depth=0)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"embed_dims": 3})
    assert ModelConfig().n == 16 and ModelConfig().patch_dim == 192


@pytest.mark.parametrize("cfg", [
    SMALL,
    ModelConfig(vocab_size=64),
    dataclasses.replace(SMALL, mode="beit"),
    dataclasses.replace(SMALL, num_classes=7),
])
def test_param_count_closed_form(cfg):
    assert Model.init(cfg).num_params() == param_count(cfg)


def test_desk_param_count_value():
    # patch 192*64+64, pos 16*64, mask 64, 6 blocks of 49_984, 2 norms, head 64*64+64
    assert param_count(ModelConfig(vocab_size=64)) == 317_760


def test_weight_decay_groups():
    m = Model.init(SMALL)
    excluded = {k for k in m.params if not decays(k)}
    assert "pos_embed" in excluded and "mask_token" in excluded
    assert all(k.endswith((".bias", ".gain", "pos_embed", "mask_token")) for k in excluded)
    assert decays("encoder.0.attn.qkv.weight") and decays("mim_head.weight")


def test_init_is_seeded():
    a, b, c = Model.init(SMALL, 1), Model.init(SMALL, 1), Model.init(SMALL, 2)
    assert all((a.params[k].data == b.params[k].data).all() for k in a.params)
    assert any((a.params[k].data != c.params[k].data).any() for k in a.params)
    w = a.params["encoder.0.mlp.fc1.weight"].data
    assert np.abs(w).max() <= 2 * SMALL.init_std + 1e-7


# --- embedding and encoding ------------------------------------------------------------


def test_embed_shapes_and_selection():
    m = Model.init(SMALL)
    p = patches_for(SMALL, 1)[0]
    full = m.embed(p)
    assert full.shape == (16, 16)
    a, b = np.arange(0, 16, 2), np.arange(1, 16, 2)
    np.testing.assert_array_equal(m.embed(p, a).data, full.data[a])
    np.testing.assert_array_equal(m.embed(p, b).data, full.data[b])
    perm = np.random.default_rng(0).permutation(16)
    np.testing.assert_array_equal(m.embed(p, perm).data, full.data[perm])
    with pytest.raises(IndexError):
        m.embed(p, [16])


def test_encode_identity_at_depth_zero_and_shape():
    cfg = dataclasses.replace(SMALL, encoder_depth=0)
    m = Model.init(cfg)
    x = m.embed(patches_for(cfg))
    np.testing.assert_array_equal(m.encode(x).data, x.data)
    m2 = Model.init(SMALL)
    for k in (1, 5, 16):
        assert m2.encode(m2.embed(patches_for(SMALL), np.arange(k))).shape == (2, k, 16)


def test_attention_rows_sum_to_one():
    m = Model.init(SMALL)
    m.trace = []
    m.encode(m.embed(patches_for(SMALL)))
    atts = [p for e, p in m.trace if e == "attention"]
    assert len(atts) == SMALL.encoder_depth
    for att in atts:
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)


# --- mask tokens and decoding ----------------------------------------------------------


def test_insert_mask_tokens_with_empty_b_reorders():
    m = Model.init(SMALL)
    perm = np.random.default_rng(1).permutation(16)
    enc = m.embed(patches_for(SMALL, 1)[0], perm)
    out = m.insert_mask_tokens(enc, perm, [])
    np.testing.assert_array_equal(out.data, m.embed(patches_for(SMALL, 1)[0]).data)


def test_insert_mask_tokens_rejects_bad_partitions():
    m = Model.init(SMALL)
    enc = m.embed(patches_for(SMALL, 1)[0], np.arange(8))
    with pytest.raises(UsageError):
        m.insert_mask_tokens(nx.Tensor(np.zeros((0, 16))), np.zeros(0, int), np.arange(16))
    with pytest.raises(UsageError):
        m.insert_mask_tokens(enc, np.arange(8), np.arange(7, 15))


def test_mask_rows_differ_only_by_position():
    m = Model.init(SMALL)
    A, B = np.arange(0, 16, 2), np.arange(1, 16, 2)
    out = m.insert_mask_tokens(m.embed(patches_for(SMALL, 1)[0], A), A, B).data
    pos = m.params["pos_embed"].data
    residual = out[B] - pos[B]
    np.testing.assert_allclose(residual, np.broadcast_to(residual[0], residual.shape), atol=1e-7)
    np.testing.assert_allclose(residual[0], m.params["mask_token"].data, atol=1e-7)


def test_decode_branch_shapes_and_unit_descriptor():
    m = Model.init(SMALL)
    a, b = m.forward_splitmask(patches_for(SMALL), half_plans(SMALL))
    assert a.decoded.shape == (2, 16, 16) and a.logits.shape == (2, 8, 10)
    np.testing.assert_allclose(np.linalg.norm(a.descriptor.data, axis=1), 1.0, atol=1e-6)


def test_descriptor_gradient_reaches_encoder():
    m = Model.init(SMALL)
    with nx.Tape():
        a, _ = m.forward_splitmask(patches_for(SMALL), half_plans(SMALL))
        w = nx.Tensor(np.random.default_rng(0).standard_normal(a.descriptor.shape))
        nx.backward(nx.tsum(nx.mul(a.descriptor, w)))
    g = m.params["encoder.0.attn.qkv.weight"].grad
    assert g is not None and np.abs(g).max() > 0


# --- full forwards -------------------------------------------------------------------


def test_splitmask_branch_sizes_and_coverage():
    cfg = ModelConfig(vocab_size=16, encoder_depth=1, decoder_depth=1)
    m = Model.init(cfg)
    m.trace = []
    plans = make_plans("block", 2, cfg.grid, 0.5, np.random.default_rng(0))
    a, b = m.forward_splitmask(patches_for(cfg), plans)
    enc_lengths = [p[1] for e, p in m.trace if e == "encoder_input"]
    assert enc_lengths == [8]  # both halves share one pass of length n/2
    assert a.logits.shape == b.logits.shape == (2, 8, 16)
    for i in range(2):
        union = np.union1d(a.positions[i], b.positions[i])
        assert union.tolist() == list(range(16))
        assert np.intersect1d(a.positions[i], b.positions[i]).size == 0


def test_splitmask_encoder_sees_only_observed_unequal_split():
    m = Model.init(SMALL)
    m.trace = []
    plans = make_plans("uniform", 2, SMALL.grid, 0.75, np.random.default_rng(0))
    a, b = m.forward_splitmask(patches_for(SMALL), plans)
    assert sorted(p[1] for e, p in m.trace if e == "encoder_input") == [4, 12]
    assert a.logits.shape == (2, 12, 10) and b.logits.shape == (2, 4, 10)


def test_complemented_plans_swap_branches():
    m = Model.init(SMALL)
    p = patches_for(SMALL)
    plans = half_plans(SMALL)
    a, b = m.forward_splitmask(p, plans)
    a2, b2 = m.forward_splitmask(p, [q.complement() for q in plans])
    np.testing.assert_allclose(a.logits.data, b2.logits.data, atol=1e-6)
    np.testing.assert_allclose(b.descriptor.data, a2.descriptor.data, atol=1e-6)


def test_beit_forward_shapes_and_shared_embeddings():
    sm = Model.init(SMALL)
    beit = Model(dataclasses.replace(SMALL, mode="beit"), sm.params)
    p = patches_for(SMALL)
    plans = half_plans(SMALL)
    logits, masked = beit.forward_beit(p, plans)
    assert logits.shape == (2, 8, 10)
    sm.trace, beit.trace = [], []
    sm.forward_splitmask(p, plans)
    beit.forward_beit(p, plans)
    e1 = next(x for e, x in sm.trace if e == "embed")
    e2 = next(x for e, x in beit.trace if e == "embed")
    np.testing.assert_array_equal(e1, e2)
    assert [x for e, x in beit.trace if e == "encoder_input"] == [(2, 16, 16)]


def test_beit_rejects_plans_without_masked_patches():
    m = Model.init(dataclasses.replace(SMALL, mode="beit"))
    empty = [MaskPlan(SMALL.grid, np.zeros(16, dtype=bool))] * 2
    with pytest.raises(UsageError):
        m.forward_beit(patches_for(SMALL), empty)


def test_features_at_layer():
    m = Model.init(SMALL)
    p = patches_for(SMALL)
    np.testing.assert_allclose(m.features_at_layer(p, 0).data, m.embed(p).data.mean(axis=1), atol=1e-6)
    for li in range(SMALL.encoder_depth + 1):
        assert m.features_at_layer(p, li).shape == (2, 16)
    with pytest.raises(IndexError):
        m.features_at_layer(p, 3)


def test_forward_is_deterministic():
    m = Model.init(SMALL)
    p, plans = patches_for(SMALL), half_plans(SMALL)
    a1, _ = m.forward_splitmask(p, plans)
    a2, _ = m.forward_splitmask(p, plans)
    assert a1.logits.data.tobytes() == a2.logits.data.tobytes()


def test_attention_cost_halves_with_split():
    # attention score entries: two sequences of n/2 versus one of n
    n = SMALL.n
    assert 2 * (n // 2) ** 2 <= n ** 2 / 2


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = Model.init(dataclasses.replace(SMALL, num_classes=3), seed=4)
    path = save_checkpoint(tmp_path / "m.smck", m, step=17, rng_state={"seed": 4}, extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.rng_state == {"seed": 4} and ck.config == m.config
    for k, t in m.params.items():
        assert ck.params[k].tobytes() == t.data.tobytes()
    again = save_checkpoint(tmp_path / "n.smck", ck.model(), step=17, rng_state={"seed": 4}, extra={"note": "x"})
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_config_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.smck", Model.init(SMALL))
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expect=dataclasses.replace(SMALL, embed_dim=32))
    load_checkpoint(path, expect=dataclasses.replace(SMALL, num_classes=5))
    (tmp_path / "bad.smck").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.smck")
