import numpy as np
import pytest

from nmtaug.corpus import EOS, MASK as MASK_ID, PAD, TokenizedPair, pad_pairs
from nmtaug.errors import ConfigError
from nmtaug.model import (
    CmlmModel,
    NmtModel,
    TransformerConfig,
    cmlm_forward,
    cmlm_logits_at,
    decode_logits,
    encode,
    nmt_forward,
    nmt_labels,
)
from nmtaug.numcore import Tensor, grad_check, no_grad
from nmtaug.numcore import functional as F

TINY = TransformerConfig(layers=1, d_model=8, d_ff=16, heads=2, dropout=0.0, max_len=16)
V = 13


def _batch():
    return pad_pairs([TokenizedPair([7, 8, 9], [10, 11]), TokenizedPair([12, 7], [8, 9, 10])])


def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(d_model=10, heads=3)
    with pytest.raises(ConfigError):
        TransformerConfig(dropout=1.0)


def test_nmt_labels_append_eos():
    labels = nmt_labels(_batch())
    np.testing.assert_array_equal(labels, [[10, 11, EOS, PAD], [8, 9, 10, EOS]])


def test_nmt_logits_shape(f64):
    model = NmtModel(TINY, V)
    loss, logits = nmt_forward(model, _batch())
    assert logits.shape == (2, 4, V)
    assert np.isfinite(loss.item())


def test_nmt_full_loss_gradient(f64):
    """Finite differences over every parameter of a one-layer model (sampled coordinates)."""
    model = NmtModel(TINY, V, seed=3)
    batch = _batch()
    names = list(model.params)

    def loss_of(*tensors):
        saved = dict(model.params)
        model.params.update({n: t for n, t in zip(names, tensors)})
        try:
            return nmt_forward(model, batch, smoothing=0.1)[0]
        finally:
            model.params.update(saved)

    err = grad_check(loss_of, [model.params[n].data for n in names], max_coords=6, rng=np.random.default_rng(0))
    assert err <= 1e-4


def test_decoder_is_causal(f64):
    model = NmtModel(TINY, V, seed=1)
    memory, mask = encode(model, np.array([[7, 8, 9]]))
    a = np.array([[2, 10, 11, 12]])
    b = np.array([[2, 10, 11, 7]])
    la = decode_logits(model, memory, mask, F.embedding(model.embed, a), a == PAD).data
    lb = decode_logits(model, memory, mask, F.embedding(model.embed, b), b == PAD).data
    np.testing.assert_allclose(la[:, :3], lb[:, :3], rtol=1e-12)
    assert not np.allclose(la[:, 3], lb[:, 3])


def test_source_padding_does_not_leak(f64):
    model = NmtModel(TINY, V, seed=1)
    short = pad_pairs([TokenizedPair([7, 8], [9])])
    padded = pad_pairs([TokenizedPair([7, 8], [9]), TokenizedPair([7, 8, 9, 10, 11], [9])])
    l1 = nmt_forward(model, short)[1].data[0]
    l2 = nmt_forward(model, padded)[1].data[0, : l1.shape[0]]
    np.testing.assert_allclose(l1, l2, rtol=1e-10, atol=1e-12)


def test_override_equal_to_lookup_gives_same_loss(f64):
    model = NmtModel(TINY, V, seed=2)
    batch = _batch()
    base = nmt_forward(model, batch)[0].item()
    x = F.embedding(model.embed, batch.x_ids)
    y = F.embedding(model.embed, batch.y_ids)
    assert nmt_forward(model, batch, x, y)[0].item() == base


def test_decoder_input_ids_do_not_change_labels(f64):
    model = NmtModel(TINY, V, seed=2)
    batch = _batch()
    same = nmt_forward(model, batch, tgt_input_ids=batch.y_ids.copy())[0].item()
    assert same == nmt_forward(model, batch)[0].item()
    other = batch.y_ids.copy()
    other[0, 0] = 12
    assert nmt_forward(model, batch, tgt_input_ids=other)[0].item() != same


def test_override_shape_checked(f64):
    model = NmtModel(TINY, V)
    with pytest.raises(ValueError):
        nmt_forward(model, _batch(), Tensor(np.zeros((2, 2, 8))))


def test_dropout_only_in_training_and_deterministic():
    cfg = TransformerConfig(layers=1, d_model=8, d_ff=16, heads=2, dropout=0.3, max_len=16)
    model = NmtModel(cfg, V)
    batch = _batch()
    with no_grad():
        ev1 = nmt_forward(model, batch)[0].item()
        ev2 = nmt_forward(model, batch)[0].item()
        tr1 = nmt_forward(model, batch, train=True, step=3, seed=1)[0].item()
        tr2 = nmt_forward(model, batch, train=True, step=3, seed=1)[0].item()
        tr3 = nmt_forward(model, batch, train=True, step=4, seed=1)[0].item()
    assert ev1 == ev2
    assert tr1 == tr2
    assert tr1 != ev1 and tr1 != tr3


def test_state_dict_round_trip_and_checksum():
    a = NmtModel(TINY, V, seed=0)
    b = NmtModel(TINY, V, seed=1)
    assert a.checksum() != b.checksum()
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()
    with pytest.raises(ConfigError):
        b.load_state_dict({"embed": a.state_dict()["embed"]})


def test_cmlm_binding_validated():
    with pytest.raises(ConfigError):
        CmlmModel(TINY, V, "middle")
    with pytest.raises(ConfigError):
        CmlmModel(TINY, V, "source", mode="neither")


def test_cmlm_logits_at_matches_full_forward(f64):
    model = CmlmModel(TINY, V, "source", seed=4)
    ids = np.array([[5, 6, 8, 4, 9, 4], [5, 7, 4, 10, 4, PAD]])
    seg = np.array([[0, 0, 0, 0, 1, 1], [0, 0, 0, 1, 1, 0]])
    attn = ids != PAD
    full = cmlm_forward(model, ids, seg, attn).data
    picked = cmlm_logits_at(model, ids, seg, attn, np.array([0, 1]), np.array([1, 3])).data
    np.testing.assert_allclose(picked, full[[0, 1], [1, 3]], rtol=1e-12)


def test_cmlm_rejects_overlong_input():
    model = CmlmModel(TINY, V, "source")
    ids = np.full((1, 17), 7)
    with pytest.raises(ValueError, match="max_len"):
        cmlm_forward(model, ids, np.zeros_like(ids), np.ones(ids.shape, bool))


# -- worked examples ------------------------------------------------------------------------------


def _attn_weights(d, heads, seed=0):
    rng = np.random.default_rng(seed)
    return {f"{part}.{kind}": Tensor(rng.normal(size=(d, d)) if kind == "w" else rng.normal(size=d)) for part in "qkvo" for kind in "wb"}


def _v_projection(v, w):
    return (v @ w["v.w"].data + w["v.b"].data) @ w["o.w"].data + w["o.b"].data


def test_attention_with_zero_scores_averages_values(f64):
    from nmtaug.model import multi_head_attention

    w = _attn_weights(8, 2)
    # zero query/key projections make every score zero
    for name in ("q.w", "q.b", "k.w", "k.b"):
        w[name] = Tensor(np.zeros_like(w[name].data))
    v = np.random.default_rng(1).normal(size=(1, 4, 8))
    mask = np.array([False, False, True, False])[None, None, None, :]
    out = multi_head_attention(Tensor(v), Tensor(v), Tensor(v), mask, 2, w).data
    expected = _v_projection(v[0, [0, 1, 3]].mean(axis=0), w)
    np.testing.assert_allclose(out[0], np.tile(expected, (4, 1)), rtol=1e-10)


def test_attention_to_a_single_open_key_returns_its_value(f64):
    from nmtaug.model import multi_head_attention

    w = _attn_weights(8, 2, seed=2)
    rng = np.random.default_rng(3)
    q, kv = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 5, 8))
    mask = np.ones(5, dtype=bool)
    mask[2] = False
    out = multi_head_attention(Tensor(q), Tensor(kv), Tensor(kv), mask[None, None, None, :], 2, w).data
    np.testing.assert_allclose(out[0], np.tile(_v_projection(kv[0, 2], w), (3, 1)), rtol=1e-10)


def test_attention_matches_per_head_loop(f64):
    from nmtaug.model import multi_head_attention

    heads, d = 2, 8
    w = _attn_weights(d, heads, seed=4)
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(2, 3, d)) for _ in range(3))
    mask = rng.random((2, 1, 3, 3)) < 0.3
    mask[..., 0] = False
    got = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), mask, heads, w).data
    proj = {p: w[p + ".w"].data for p in "qkvo"}
    bias = {p: w[p + ".b"].data for p in "qkvo"}
    dk = d // heads
    expected = np.zeros_like(got)
    for b in range(2):
        Q, K, Vv = q[b] @ proj["q"] + bias["q"], k[b] @ proj["k"] + bias["k"], v[b] @ proj["v"] + bias["v"]
        ctx = np.zeros((3, d))
        for h in range(heads):
            cols = slice(h * dk, (h + 1) * dk)
            for i in range(3):
                scores = np.array([Q[i, cols] @ K[j, cols] / np.sqrt(dk) for j in range(3)])
                scores[mask[b, 0, i]] = -np.inf
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                ctx[i, cols] = sum(weights[j] * Vv[j, cols] for j in range(3))
        expected[b] = ctx @ proj["o"] + bias["o"]
    np.testing.assert_allclose(got, expected, atol=1e-6)


def _closed_form_counts(cfg, vocab):
    d, f, layers = cfg.d_model, cfg.d_ff, cfg.layers
    ln = 2 * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    nmt = vocab * d + layers * (2 * ln + attn + ffn) + ln + layers * (3 * ln + 2 * attn + ffn) + ln
    cmlm = vocab * d + 2 * d + cfg.max_len * d + ln + layers * (2 * ln + attn + ffn) + ln + vocab
    return nmt, cmlm


@pytest.mark.parametrize("layers,d,f", [(1, 8, 16), (2, 16, 24), (3, 12, 48)])
def test_parameter_counts_match_closed_form(layers, d, f):
    cfg = TransformerConfig(layers=layers, d_model=d, d_ff=f, heads=2, dropout=0.0, max_len=20)
    nmt, cmlm = _closed_form_counts(cfg, 31)
    assert NmtModel(cfg, 31).parameter_count() == nmt
    assert CmlmModel(cfg, 31, "target").parameter_count() == cmlm


def test_single_pair_is_memorized_within_200_steps():
    from nmtaug.trainer import DaConfig, OptimConfig, train_nmt

    cfg = TransformerConfig(layers=1, d_model=16, d_ff=32, heads=2, dropout=0.0, max_len=16)
    model = NmtModel(cfg, V, seed=0)
    pair = TokenizedPair([7, 8, 9], [10, 11, 12])
    optim = OptimConfig(warmup=20, lr_factor=1.0, label_smoothing=0.0, max_tokens=8)
    run = train_nmt(model, [pair], DaConfig(), optim, epochs=200, seed=0)
    assert len(run.losses) == 200
    assert run.loss_trace[-1] < 0.1


def test_cmlm_pad_positions_do_not_leak(f64):
    model = CmlmModel(TINY, V, "source", seed=1)
    ids = np.array([[5, 7, MASK_ID, 4, 9, 4, PAD, PAD]])
    seg = np.array([[0, 0, 0, 0, 1, 1, 0, 0]])
    attn = ids != PAD
    base = cmlm_forward(model, ids, seg, attn).data
    flipped = ids.copy()
    flipped[0, 6:] = 11
    out = cmlm_forward(model, flipped, seg, attn).data
    np.testing.assert_allclose(out[0, :6], base[0, :6], rtol=1e-12)


def test_cmlm_rows_are_independent(f64):
    model = CmlmModel(TINY, V, "target", seed=2)
    rng = np.random.default_rng(0)
    ids = rng.integers(7, V, size=(4, 6))
    seg = np.tile([0, 0, 0, 1, 1, 1], (4, 1))
    attn = np.ones_like(ids, dtype=bool)
    attn[1, 4:] = False
    perm = np.array([2, 0, 3, 1])
    a = cmlm_forward(model, ids, seg, attn).data
    b = cmlm_forward(model, ids[perm], seg[perm], attn[perm]).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-12)


def test_degenerate_corpus_teaches_the_only_token():
    from nmtaug.cmlm import example_with_positions, finetune_cmlm, predict_masked

    a = 7
    model = CmlmModel(TINY, V, "source", seed=0)
    corpus = [TokenizedPair([a, a, a], [a, a, a])] * 4
    finetune_cmlm(model, corpus, "source", "both", 5e-3, 60, 4, seed=0)
    ex = example_with_positions(corpus[0], "source", "both", [1])
    (dist,) = predict_masked(model, ex)
    assert int(np.argmax(dist)) == a
