import numpy as np
import pytest

from arclust import tensorad as ad
from arclust.config import DESK, PAPER
from arclust.errors import ConfigurationError, ContractError
from arclust.layout import (
    BatchLayout,
    ClusterScheme,
    OrderPolicy,
    assemble_layout,
    make_order,
    permute_storage,
    sample_layout,
)
from arclust.model import (
    ModelConfig,
    Net,
    decode_predict,
    downstream_forward,
    encode,
    gather_targets,
    init_params,
    param_count,
    param_shapes,
    positional_embedding,
    predict,
    pretrain_loss,
)
from arclust.tokenizer import normalize_cubes


def _cfg(**kw):
    return DESK.replace(precision=64, **kw).model_config()


def _tokens(cfg: ModelConfig, batch=1, seed=0):
    return np.random.default_rng(seed).random((batch, cfg.num_tokens, cfg.cube_dim))


def _plan(seed=0, ratio=0.8, policy=OrderPolicy.RANDOM_RASTER, scheme=None):
    scheme = scheme or DESK.scheme
    return sample_layout(scheme, policy, ratio, seed, 0, 0)


# ---------------------------------------------------------------- positions


def test_origin_embedding_is_sin_zero_cos_one():
    e = positional_embedding([(0, 0, 0)], 96)[0]
    half = 96 // 6
    for g in range(3):
        block = e[2 * half * g: 2 * half * (g + 1)]
        assert np.all(block[:half] == 0.0)
        assert np.all(block[half:] == 1.0)


def test_embedding_is_separable():
    a, b = positional_embedding([(1, 2, 3), (1, 2, 0)], 96)
    half = 96 // 6
    diff = np.flatnonzero(a != b)
    assert diff.min() >= 4 * half and diff.max() < 6 * half


def test_remainder_dims_are_zero():
    e = positional_embedding([(3, 1, 2)], 64)[0]
    assert np.all(e[60:] == 0.0)


@pytest.mark.parametrize("dim", [96, 64, 768, 512])
def test_similarity_decreases_along_an_axis(dim):
    e = positional_embedding([(0, 0, k) for k in range(5)], dim)
    sims = e @ e[0]
    assert np.all(np.diff(sims) < 0)


# ---------------------------------------------------------------- parameters


def test_param_count_closed_form_matches_shapes():
    for cfg in (_cfg(), _cfg(decoder_self_attention=True), PAPER.model_config()):
        assert param_count(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_desk_param_count_regression():
    assert param_count(DESK.model_config()) == 575400


def test_init_statistics():
    cfg = PAPER.model_config()
    p = init_params(cfg, seed=0)
    w = p["enc.0.attn.wq"]
    assert abs(w.std() - 0.02) < 0.003 and np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(p["enc.0.attn.bq"] == 0)
    assert np.all(p["enc.0.ln1.g"] == 1)
    assert p["dec.query"].shape == (cfg.dec_width,)


def test_init_is_seeded():
    cfg = _cfg()
    a, b, c = init_params(cfg, 1), init_params(cfg, 1), init_params(cfg, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed.w"], c["embed.w"])


def test_heads_must_divide_widths():
    with pytest.raises(ConfigurationError, match="dec_width"):
        ModelConfig(cube_dim=8, grid=(2, 2, 2), embed_dim=12, num_heads=4, dec_width=10, dec_heads=4)
    with pytest.raises(ConfigurationError, match="embed_dim"):
        ModelConfig(cube_dim=8, grid=(2, 2, 2), embed_dim=10, num_heads=4)


def test_missing_or_misshapen_parameter_is_contract_error():
    cfg = _cfg()
    p = init_params(cfg, 0, np.float64)
    bad = dict(p)
    del bad["head.w"]
    with pytest.raises(ContractError, match="missing"):
        Net(cfg, bad)
    bad = dict(p, **{"head.w": np.zeros((3, 3))})
    with pytest.raises(ContractError, match="shape"):
        Net(cfg, bad)


# ---------------------------------------------------------------- encoder


def test_encoder_shapes_and_attention_rows():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    plan = _plan()
    out, rec = encode(plan, _tokens(cfg), params, cfg)
    assert out.shape == (1, plan.enc_len, cfg.embed_dim)
    assert len(rec) == cfg.enc_depth
    for maps in rec.layers:
        assert maps.shape == (1, cfg.num_heads, plan.enc_len, plan.enc_len)
        np.testing.assert_allclose(maps.sum(-1), 1.0, atol=1e-12)
        assert np.all(maps[:, :, ~plan.enc_mask] == 0.0)


def test_first_cluster_sees_only_itself():
    # under the block-causal mask the first kept cluster is an unmasked
    # transformer over its own tokens
    cfg = _cfg()
    params = init_params(cfg, 3, np.float64)
    plan = _plan(seed=1, ratio=0.0)
    x = _tokens(cfg)
    net = Net(cfg, params)
    layout = BatchLayout.stack([plan])
    got, _ = net.encode(x, layout)
    first = plan.enc_pos == 0
    alone = BatchLayout(plan.encoder_tokens[first][None], np.zeros((1, first.sum()), dtype=np.int64),
                        np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0), dtype=np.int64))
    want, _ = net.encode(x, alone)
    assert np.all(layout.enc_mask[0][np.ix_(first, first)])
    np.testing.assert_allclose(got.data[0, first], want.data[0], rtol=0, atol=1e-12)


def test_storage_order_does_not_change_outputs():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    plan = _plan(seed=4)
    x = _tokens(cfg, seed=4)
    blocks = len(plan.kept_clusters)
    perm = np.random.default_rng(0).permutation(blocks)
    moved = permute_storage(plan, perm, np.random.default_rng(1).permutation(blocks - 1))
    a, _ = encode(plan, x, params, cfg)
    b, _ = encode(moved, x, params, cfg)
    pa = predict(plan, x, params, cfg)[0]
    pb = predict(moved, x, params, cfg)[0]
    by_token_a = {int(t): a[0, i] for i, t in enumerate(plan.encoder_tokens)}
    for i, t in enumerate(moved.encoder_tokens):
        np.testing.assert_allclose(b[0, i], by_token_a[int(t)], atol=1e-6)
    by_token_pa = {int(t): pa[i] for i, t in enumerate(plan.decoder_tokens)}
    for i, t in enumerate(moved.decoder_tokens):
        np.testing.assert_allclose(pb[i], by_token_pa[int(t)], atol=1e-6)


def test_zero_residual_branches_give_embedded_inputs():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    for k in params:
        if k.startswith("enc.") and (".attn.wo" in k or ".attn.bo" in k or ".mlp.w2" in k or ".mlp.b2" in k):
            params[k][...] = 0.0
    params["enc.norm.g"][...] = 1.0
    plan = _plan()
    x = _tokens(cfg)
    out, _ = encode(plan, x, params, cfg)
    emb = x[0, plan.encoder_tokens] @ params["embed.w"] + params["embed.b"]
    from arclust.model import _position_table
    emb = emb + _position_table(cfg.grid, cfg.embed_dim)[plan.encoder_tokens]
    mu = emb.mean(-1, keepdims=True)
    ref = (emb - mu) / np.sqrt(emb.var(-1, keepdims=True) + cfg.ln_eps)
    np.testing.assert_allclose(out[0], ref, atol=1e-10)


def test_encoder_rejects_wrong_token_shape():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    with pytest.raises(ContractError):
        encode(_plan(), np.zeros((1, 10, cfg.cube_dim)), params, cfg)
    with pytest.raises(ContractError):
        encode(_plan(), np.zeros((1, cfg.num_tokens, 3)), params, cfg)


# ---------------------------------------------------------------- decoder


def test_zero_head_predicts_zero():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    params["head.w"][...] = 0
    params["head.b"][...] = 0
    pred = predict(_plan(), _tokens(cfg), params, cfg)
    assert pred.shape == (1, 48, cfg.cube_dim)
    assert np.all(pred == 0.0)


def test_without_positions_same_cluster_targets_coincide():
    cfg = DESK.replace(precision=64).model_config()
    import dataclasses
    cfg = dataclasses.replace(cfg, use_pos_embed=False)
    params = init_params(cfg, 0, np.float64)
    plan = _plan(seed=2)
    pred = predict(plan, _tokens(cfg), params, cfg)[0]
    for p in np.unique(plan.dec_pos):
        rows = pred[plan.dec_pos == p]
        np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))
    # with positions they differ
    cfg2 = dataclasses.replace(cfg, use_pos_embed=True)
    pred2 = predict(plan, _tokens(cfg2), params, cfg2)[0]
    rows = pred2[plan.dec_pos == plan.dec_pos[0]]
    assert not np.allclose(rows[0], rows[1])


def test_all_false_cross_mask_row_is_contract_error():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    plan = _plan()
    net = Net(cfg, params)
    layout = BatchLayout.stack([plan])
    out, _ = net.encode(_tokens(cfg), layout)
    mask = layout.cross_mask.copy()
    mask[0, 3] = False
    with pytest.raises(ContractError, match="no admissible key"):
        net.decode(out, layout, cross_mask=mask)


def test_decode_predict_matches_predict():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    plan = _plan(seed=5)
    x = _tokens(cfg, seed=5)
    out, _ = encode(plan, x, params, cfg)
    np.testing.assert_array_equal(decode_predict(out, plan, params, cfg), predict(plan, x, params, cfg))


def test_decoder_self_attention_keeps_causality():
    cfg = _cfg(decoder_self_attention=True)
    params = init_params(cfg, 0, np.float64)
    plan = _plan(seed=6)
    x = _tokens(cfg, seed=6)
    base = predict(plan, x, params, cfg)[0]
    # perturb the pixels of the last target cluster
    later = plan.decoder_tokens[plan.dec_pos == plan.dec_pos.max()]
    y = x.copy()
    y[0, later] += 1.0
    moved = predict(plan, y, params, cfg)[0]
    early = plan.dec_pos < plan.dec_pos.max()
    np.testing.assert_array_equal(base[early], moved[early])


# ---------------------------------------------------------------- loss and downstream


def test_loss_zero_on_exact_fit_and_storage_invariant():
    cfg = _cfg()
    plan = _plan()
    x = _tokens(cfg)
    tgt = gather_targets(normalize_cubes(x)[0], plan)
    assert float(pretrain_loss(tgt, tgt).data) == 0.0
    pred = np.random.default_rng(0).normal(size=tgt.shape)
    perm = np.random.default_rng(1).permutation(tgt.shape[1])
    a = float(pretrain_loss(pred, tgt).data)
    b = float(pretrain_loss(pred[:, perm], tgt[:, perm]).data)
    assert a == pytest.approx(b, rel=1e-14)


def test_zero_prediction_loss_on_standardized_targets():
    cfg = _cfg()
    x = _tokens(cfg, seed=9)
    normed, _, std = normalize_cubes(x, 1e-6)
    plan = _plan(seed=9)
    tgt = gather_targets(normed, plan)
    loss = float(pretrain_loss(np.zeros_like(tgt), tgt).data)
    # each standardized cube has mean square var / (var + eps)
    var = (std[0, plan.decoder_tokens].ravel() ** 2) - 1e-6
    expect = float(np.mean(var / (var + 1e-6)))
    assert loss == pytest.approx(expect, rel=1e-12)
    assert loss == pytest.approx(1.0, abs=1e-3)


def test_downstream_zero_head_and_batch_independence():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    x = _tokens(cfg, batch=3)
    logits = downstream_forward(x, params, cfg)
    assert logits.shape == (3, cfg.num_classes)
    single = downstream_forward(x[1:2], params, cfg)
    np.testing.assert_allclose(single[0], logits[1], rtol=0, atol=1e-12)
    params["cls.w"][...] = 0
    params["cls.b"][...] = 0
    assert np.all(downstream_forward(x, params, cfg) == 0)


def test_full_attention_for_downstream_features():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    net = Net(cfg, params)
    _, rec = net.features(_tokens(cfg), record=True)
    for maps in rec.layers:
        assert maps.shape[-2:] == (cfg.num_tokens, cfg.num_tokens)
        assert np.all(maps > 0)


def test_gradients_flow_to_every_parameter():
    cfg = _cfg()
    params = init_params(cfg, 0, np.float64)
    tape = ad.Tape()
    net = Net(cfg, params, tape)
    plan = BatchLayout.stack([_plan(seed=s) for s in range(2)])
    x = _tokens(cfg, batch=2)
    out, _ = net.encode(x, plan)
    loss = ad.mse(net.decode(out, plan), gather_targets(normalize_cubes(x)[0], plan))
    g = ad.backward(tape, loss)
    missing = [k for k, t in net.p.items() if not k.startswith(("cls.", "dec.0.self", "dec.1.self"))
               and not np.any(g[t])]
    assert missing == []
