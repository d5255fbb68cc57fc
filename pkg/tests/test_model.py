import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from perceiver_prompt import autograd as ag
from perceiver_prompt.autograd import Tensor
from perceiver_prompt.model import (BOS, DEFAULT_SYMBOLS, EOS, PAD, SPECIALS, ASRModel, EncoderState, ModelConfig,
                                    Tokenizer, UnknownSymbolError, detokenize, stem_length, tokenize)
from perceiver_prompt.nn import MultiHeadAttention, key_padding_mask

VOCAB = SPECIALS + DEFAULT_SYMBOLS


@given(st.text(alphabet="".join(DEFAULT_SYMBOLS), max_size=12))
def test_tokenizer_round_trip(text):
    ids = tokenize(text, VOCAB)
    assert ids[0] == VOCAB.index(BOS) and ids[-1] == VOCAB.index(EOS)
    assert detokenize(ids, VOCAB) == text


def test_tokenizer_specials_have_fixed_ids():
    tok = Tokenizer(VOCAB)
    assert (tok.pad_id, tok.bos_id, tok.eos_id) == (0, 1, 2)


def test_tokenizer_rejects_unknown_symbol():
    with pytest.raises(UnknownSymbolError):
        tokenize("ac", VOCAB)  # 'c' is not in the corpus alphabet


def test_decode_stops_at_eos_and_drops_specials():
    tok = Tokenizer(VOCAB)
    ids = [tok.bos_id, tok.index["a"], tok.pad_id, tok.index["b"], tok.eos_id, tok.index["d"]]
    assert tok.decode(ids) == "ab"


def test_vocab_must_hold_each_special_once():
    with pytest.raises(ValueError):
        Tokenizer((PAD, BOS) + DEFAULT_SYMBOLS)


def test_d_model_must_divide_heads():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)


@pytest.mark.parametrize("frames", [2, 3, 98, 99])
def test_stem_halves_the_frame_count(tiny_cfg, frames):
    m = ASRModel(tiny_cfg)
    out = m.conv_stem(np.zeros((frames, tiny_cfg.n_mels)))
    assert out.shape == (stem_length(frames), tiny_cfg.d_model) == ((frames + 1) // 2, tiny_cfg.d_model)


def test_stem_rejects_single_frame(tiny_cfg):
    with pytest.raises(ag.ShapeError):
        ASRModel(tiny_cfg).conv_stem(np.zeros((1, tiny_cfg.n_mels)))


def test_encoder_preserves_length_for_1_to_128(tiny_cfg, rng):
    m = ASRModel(tiny_cfg)
    for n in range(1, 129):
        state = m.encode(Tensor(rng.standard_normal((n, tiny_cfg.d_model))))
        assert state.embeddings.shape == (1, n, tiny_cfg.d_model)


def test_encoder_rejects_wrong_width(tiny_cfg):
    with pytest.raises(ag.ShapeError):
        ASRModel(tiny_cfg).encode(Tensor(np.zeros((3, tiny_cfg.d_model + 1))))


def test_padding_does_not_leak_into_valid_rows(tiny_cfg, rng):
    m = ASRModel(tiny_cfg)
    a = rng.standard_normal((5, tiny_cfg.n_mels))
    b = rng.standard_normal((9, tiny_cfg.n_mels))
    x, lengths = m.stem_batch([a, b])
    batched = m.encode(x, lengths)
    alone = m.encode(ag.reshape(m.conv_stem(a), (1, 3, tiny_cfg.d_model)))
    np.testing.assert_allclose(batched.embeddings.data[0, :3], alone.embeddings.data[0], atol=1e-5)
    tokens = np.array([[1, 5, 6]])
    lb = m.logits(batched, np.repeat(tokens, 2, axis=0)).data[0]
    la = m.logits(alone, tokens).data[0]
    np.testing.assert_allclose(lb, la, atol=1e-5)


def test_decoder_is_causal(tiny_cfg, rng):
    m = ASRModel(tiny_cfg)
    state = m.encode(Tensor(rng.standard_normal((4, tiny_cfg.d_model))))
    t1 = np.array([[1, 4, 5, 6, 7]])
    t2 = t1.copy()
    t2[0, 3] = 9
    l1, l2 = m.logits(state, t1).data, m.logits(state, t2).data
    np.testing.assert_array_equal(l1[0, :3], l2[0, :3])
    assert not np.allclose(l1[0, 3:], l2[0, 3:])


def test_attention_mask_hides_padded_keys(rng):
    att = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.standard_normal((1, 4, 8)))
    y = Tensor(x.data.copy())
    y.data[0, 3] = 100.0
    mask = key_padding_mask([3], 4)
    a, b = att(x, mask=mask).data, att(y, mask=mask).data
    np.testing.assert_allclose(a[0, :3], b[0, :3], atol=1e-5)


def test_decode_step_checks_prefix(tiny_cfg, rng):
    m = ASRModel(tiny_cfg)
    state = m.encode(Tensor(rng.standard_normal((3, tiny_cfg.d_model))))
    assert m.decode_step(state, [1]).shape == (len(tiny_cfg.vocab),)
    with pytest.raises(ValueError):
        m.decode_step(state, [3, 4])
    with pytest.raises(ValueError):
        m.decode_step(state, [1] * (tiny_cfg.max_target_len + 1))


def test_greedy_decode_is_bounded_and_batch_consistent(tiny_cfg, rng):
    m = ASRModel(tiny_cfg)
    mels = [rng.standard_normal((n, tiny_cfg.n_mels)) for n in (6, 11)]
    both = m.transcribe(mels)
    assert both == [m.transcribe([mels[0]])[0], m.transcribe([mels[1]])[0]]
    assert all(len(s) <= tiny_cfg.max_target_len for s in both)


def test_loss_ignores_padding_targets(tiny_cfg, rng):
    m = ASRModel(tiny_cfg)
    state = m.encode(Tensor(rng.standard_normal((2, 3, tiny_cfg.d_model))))
    l1 = m.loss(_item(state, 0), ["ab"]).item()  # 3 targets: a b EOS
    l2 = m.loss(_item(state, 1), ["abdef"]).item()  # 6 targets
    assert m.loss(state, ["ab", "abdef"]).item() == pytest.approx((3 * l1 + 6 * l2) / 9, rel=1e-5)


def _item(state, i):
    return EncoderState(Tensor(state.embeddings.data[i:i + 1]), state.lengths[i:i + 1])


def test_training_loss_drops_on_one_example(tiny_cfg, rng):
    from perceiver_prompt.optim import Adam
    m = ASRModel(tiny_cfg, seed=3)
    mel = rng.standard_normal((8, tiny_cfg.n_mels))
    opt = Adam(m.parameters(), lr=1e-2)
    losses = []
    for _ in range(60):
        opt.zero_grad()
        x, lens = m.stem_batch([mel])
        loss = m.loss(m.encode(x, lens), ["bad"])
        ag.backward(loss, m.parameters())
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.1 * losses[0]
    assert m.transcribe([mel]) == ["bad"]


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    cfg = ModelConfig(n_mels=4, d_model=8, n_heads=2, n_encoder_blocks=1, n_decoder_blocks=1, ffn_dim=8,
                      max_target_len=4)
    rng = np.random.default_rng(seed)
    with ag.default_dtype(np.float64):
        m = ASRModel(cfg, seed=seed)
        mels = [rng.standard_normal((5, 4)), rng.standard_normal((3, 4))]

        def loss():
            x, lens = m.stem_batch(mels)
            return m.loss(m.encode(x, lens), ["ab", "d"])

        params = m.parameters()
        ag.gradcheck(loss, params)
