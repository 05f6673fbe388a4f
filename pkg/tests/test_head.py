import math

import numpy as np
import pytest

from vireo.autodiff import DimensionError, Tensor, grad_check, mul, cross_entropy, reduce_sum
from vireo.errors import ConfigError
from vireo.head import EmbeddingHead, HeadConfig, positional_encoding
from vireo.layers import record_attention
from vireo.providers import TextBank, synth_text_bank


def make_head(seed, d=4, decoder_layers=1, num_scales=2, temperature=None):
    cfg = HeadConfig(decoder_layers=decoder_layers, d=d, temperature=temperature,
                     num_scales=num_scales)
    return EmbeddingHead(np.random.default_rng(seed), cfg)


def naive_softmax_rows(m):
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def oracle_attention(q_in, kv, attn):
    q = q_in @ attn.wq.data
    k = kv @ attn.wk.data
    v = kv @ attn.wv.data
    w = naive_softmax_rows(q @ k.T / math.sqrt(attn.wq.shape[1]))
    return w @ v


# ---------------------------------------------------------------- posenc

def test_positional_encoding_bounded():
    pe = positional_encoding(5, 7, 8).data
    assert np.all(pe >= -1.0) and np.all(pe <= 1.0)


def test_positional_encoding_origin():
    pe = positional_encoding(3, 3, 8).data
    origin = pe[0, 0]
    assert np.array_equal(origin[0:2], [0.0, 0.0])      # sin(y) channels
    assert np.array_equal(origin[2:4], [1.0, 1.0])      # cos(y) channels
    assert np.array_equal(origin[4:6], [0.0, 0.0])      # sin(x) channels
    assert np.array_equal(origin[6:8], [1.0, 1.0])      # cos(x) channels


def test_positional_encoding_matches_closed_form():
    h = w = 4
    d = 8
    q = d // 4
    pe = positional_encoding(h, w, d).data
    for y in range(h):
        for x in range(w):
            for i in range(q):
                freq = 10000.0 ** (-i / q)
                assert pe[y, x, i] == math.sin(y * freq)
                assert pe[y, x, q + i] == math.cos(y * freq)
                assert pe[y, x, 2 * q + i] == math.sin(x * freq)
                assert pe[y, x, 3 * q + i] == math.cos(x * freq)


def test_positional_encoding_width_must_divide_by_four():
    with pytest.raises(ConfigError):
        positional_encoding(2, 2, 6)


# ---------------------------------------------------------------- decoder

def test_pixel_decode_single_scale_is_identity_compress():
    head = make_head(0, d=4, num_scales=1)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 3, 4)))
    out = head.pixel_decode([x])
    assert np.array_equal(out.data, x.data)  # identity-initialized compress


def test_pixel_decode_zero_values_keep_upsampled_coarsest():
    head = make_head(2, d=4, num_scales=2)
    for stage in head.scale_attn:
        stage.wv.data[...] = 0.0
    rng = np.random.default_rng(3)
    coarse = Tensor(rng.standard_normal((2, 2, 4)))
    fine = Tensor(rng.standard_normal((4, 4, 4)))
    out = head.pixel_decode([coarse, fine])

    from vireo.autodiff import bilinear_resize, transpose
    expected = transpose(bilinear_resize(transpose(coarse, (2, 0, 1)), 4, 4), (1, 2, 0))
    assert np.max(np.abs(out.data - expected.data)) < 1e-12


def test_pixel_decode_grad_check():
    head = make_head(19, d=3, num_scales=2)
    rng = np.random.default_rng(19)
    coarse = Tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    fine = Tensor(rng.standard_normal((3, 3, 3)), requires_grad=True)
    params = [p for _, p in head.named_parameters()] + [coarse, fine]

    def loss(*_):
        out = head.pixel_decode([coarse, fine])
        return reduce_sum(mul(out, out))

    assert grad_check(loss, params) <= 1e-4


def test_transformer_decode_zero_projections_identity():
    head = make_head(4, d=4, decoder_layers=2)
    for block in head.blocks:
        for _, p in block.named_parameters("b"):
            p.data[...] = 0.0
    rng = np.random.default_rng(5)
    queries = Tensor(rng.standard_normal((3, 4)))
    memory = Tensor(rng.standard_normal((2, 2, 4)))
    out = head.transformer_decode(queries, memory)
    assert np.array_equal(out.data, queries.data)


def test_transformer_decode_matches_loop_oracle():
    head = make_head(20, d=8, decoder_layers=1)
    rng = np.random.default_rng(20)
    queries = Tensor(rng.standard_normal((2, 8)))
    memory = Tensor(rng.standard_normal((2, 2, 8)))
    out = head.transformer_decode(queries, memory).data

    block = head.blocks[0]
    q = queries.data
    q = q + oracle_attention(q, q, block.self_attn)
    q = q + oracle_attention(q, memory.data.reshape(4, 8), block.cross_attn)
    hidden = np.maximum(q @ block.ffn.first.weight.data + block.ffn.first.bias.data, 0.0)
    q = q + (hidden @ block.ffn.second.weight.data + block.ffn.second.bias.data)
    assert np.max(np.abs(out - q)) <= 1e-9


def test_decoder_attention_rows_sum_to_one():
    head = make_head(6, d=4, decoder_layers=2)
    rng = np.random.default_rng(7)
    sink = []
    with record_attention(sink):
        head.transformer_decode(Tensor(rng.standard_normal((3, 4))),
                                Tensor(rng.standard_normal((2, 2, 4))))
    assert len(sink) == 4  # 2 layers x (self + cross)
    for weights in sink:
        assert np.all(np.abs(weights.sum(axis=1) - 1.0) <= 1e-6)


# ---------------------------------------------------------------- class embeds

def test_classification_embeddings_open_class_count():
    head = make_head(8, d=4)
    queries = Tensor(np.random.default_rng(9).standard_normal((3, 4)))
    small = synth_text_bank(["a", "b"], seed=1, d=4)
    large = synth_text_bank(["a", "b", "c", "d", "e"], seed=1, d=4)
    assert head.classification_embeddings(queries, small).shape == (2, 4)
    assert head.classification_embeddings(queries, large).shape == (5, 4)


def test_classification_embeddings_zero_mlp_gives_text_rows():
    head = make_head(10, d=4)
    for _, p in head.cls_mlp.named_parameters("m"):
        p.data[...] = 0.0
    bank = synth_text_bank(["u", "v", "w"], seed=2, d=4)
    queries = Tensor(np.random.default_rng(11).standard_normal((2, 4)))
    out = head.classification_embeddings(queries, bank)
    assert np.array_equal(out.data, bank.embeddings.data)


def test_classification_embeddings_match_loop_oracle():
    head = make_head(21, d=4)
    rng = np.random.default_rng(21)
    bank = synth_text_bank(["x", "y", "z"], seed=21, d=4)
    queries = Tensor(rng.standard_normal((2, 4)))
    out = head.classification_embeddings(queries, bank).data

    hidden = np.maximum(queries.data @ head.cls_mlp.first.weight.data
                        + head.cls_mlp.first.bias.data, 0.0)
    values = hidden @ head.cls_mlp.second.weight.data + head.cls_mlp.second.bias.data
    expected = bank.embeddings.data + oracle_attention(bank.embeddings.data, values,
                                                       head.cls_attn)
    assert np.max(np.abs(out - expected)) <= 1e-10


# ---------------------------------------------------------------- prediction

def test_final_prediction_orthonormal_selection():
    head = make_head(12, d=4, temperature=0.5)
    cls_embeds = Tensor(np.eye(4))
    mask = np.zeros((2, 2, 4))
    picked = np.array([[0, 1], [2, 3]])
    for x in range(2):
        for y in range(2):
            mask[x, y, picked[x, y]] = 1.0
    logits = head.final_prediction(Tensor(mask), cls_embeds)
    pred = np.argmax(logits.data, axis=2)
    assert np.array_equal(pred, picked)
    sorted_logits = np.sort(logits.data, axis=2)
    margins = sorted_logits[:, :, -1] - sorted_logits[:, :, -2]
    assert np.allclose(margins, 1.0 / 0.5, atol=1e-12)


def test_final_prediction_zero_mask_ties_to_lowest_class():
    head = make_head(13, d=4)
    logits = head.final_prediction(Tensor(np.zeros((2, 2, 4))), Tensor(np.eye(4)))
    assert not np.any(logits.data)
    assert not np.any(np.argmax(logits.data, axis=2))


def test_final_prediction_matches_triple_loop_oracle():
    rng = np.random.default_rng(22)
    head = make_head(14, d=5, temperature=1.0 / math.sqrt(5))
    e_mask = rng.standard_normal((3, 3, 5))
    e_cls = rng.standard_normal((4, 5))
    logits = head.final_prediction(Tensor(e_mask), Tensor(e_cls)).data

    expected = np.zeros((3, 3, 4))
    for x in range(3):
        for y in range(3):
            for k in range(4):
                total = 0.0
                for j in range(5):
                    total += e_mask[x, y, j] * e_cls[k, j]
                expected[x, y, k] = total * math.sqrt(5)
    assert np.max(np.abs(logits - expected)) <= 1e-12


def test_final_prediction_width_mismatch():
    head = make_head(15, d=4)
    with pytest.raises(DimensionError):
        head.final_prediction(Tensor(np.zeros((2, 2, 4))), Tensor(np.zeros((3, 5))))


# ---------------------------------------------------------------- forward

def run_forward(head, bank, seed=30, n=3):
    rng = np.random.default_rng(seed)
    d = head.config.d
    refined = [Tensor(rng.standard_normal((2, 2, d))),
               Tensor(rng.standard_normal((4, 4, d)))]
    queries = Tensor(rng.standard_normal((n, d)))
    return head.forward(refined, queries, bank)


def test_forward_shapes_and_embedding_consistency():
    head = make_head(16, d=8, num_scales=2)
    bank = synth_text_bank(["a", "b", "c"], seed=16, d=8)
    pred = run_forward(head, bank)
    assert pred.logits.shape == (4, 4, 3)
    assert pred.mask_embeds.shape == (4, 4, 8)
    assert pred.cls_embeds.shape == (3, 8)
    recomputed = np.einsum("hwd,kd->hwk", pred.mask_embeds.data,
                           pred.cls_embeds.data) / head.config.temperature
    assert np.max(np.abs(pred.logits.data - recomputed)) <= 1e-9


def test_forward_class_permutation_equivariance():
    head = make_head(17, d=8, num_scales=2)
    labels = ["a", "b", "c", "d"]
    bank = synth_text_bank(labels, seed=17, d=8)
    perm = [2, 3, 0, 1]
    permuted = TextBank(classes=[labels[i] for i in perm],
                        embeddings=Tensor(bank.embeddings.data[perm]),
                        prompts=[bank.prompts[i] for i in perm])
    a = run_forward(head, bank).logits.data
    b = run_forward(head, permuted).logits.data
    assert np.max(np.abs(b - a[:, :, perm])) < 1e-12
    inverse = np.argsort(perm)
    assert np.array_equal(np.argmax(a, axis=2),
                          np.asarray(perm)[np.argmax(b, axis=2)])
    assert np.array_equal(np.argmax(b, axis=2), inverse[np.argmax(a, axis=2)])


def test_forward_open_vocabulary_grows_logits():
    head = make_head(18, d=8, num_scales=2)
    small = synth_text_bank(["a", "b"], seed=18, d=8)
    large = synth_text_bank(["a", "b", "c", "d", "e"], seed=18, d=8)
    assert run_forward(head, small).logits.shape == (4, 4, 2)
    assert run_forward(head, large).logits.shape == (4, 4, 5)


def test_forward_deterministic():
    def run():
        head = make_head(19, d=8, num_scales=2)
        bank = synth_text_bank(["a", "b"], seed=19, d=8)
        return run_forward(head, bank).logits.data.tobytes()

    assert run() == run()


def test_full_head_grad_check_with_cross_entropy():
    head = make_head(23, d=4, decoder_layers=1, num_scales=2)
    bank = synth_text_bank(["a", "b"], seed=23, d=4)
    rng = np.random.default_rng(23)
    refined = [Tensor(rng.standard_normal((2, 2, 4))),
               Tensor(rng.standard_normal((2, 2, 4)))]
    queries = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    labels = np.array([[0, 1], [1, 0]])
    params = [p for _, p in head.named_parameters()] + [queries]

    def loss(*_):
        pred = head.forward(refined, queries, bank)
        return cross_entropy(pred.logits, labels, class_axis=2)

    assert grad_check(loss, params) <= 1e-4
