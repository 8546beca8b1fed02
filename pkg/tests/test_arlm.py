import math

import numpy as np
import pytest

from arflow.arlm import (
    BOI,
    BOS,
    EOI,
    IMAGE_OFFSET,
    PAD,
    SEP_EDIT,
    VOCAB_SIZE,
    ARConfig,
    ARModel,
    build_sequence,
    ce_loss,
    logprob_of,
    pad_batch,
    sample_batch,
    sample_tokens,
    target_start,
)
from arflow.errors import GrammarError, UsageError
from arflow.tensor import Tensor, grad_check, no_grad, precision


TOKENS = np.arange(64).reshape(8, 8) % 16


def test_text_to_image_sequence():
    ids, mask = build_sequence("a red circle and a square", None, TOKENS)

    # BOS, 6 words, BOI, 64 image tokens, EOI
    assert len(ids) == 73
    assert ids[0] == BOS and ids[7] == BOI and ids[-1] == EOI
    np.testing.assert_array_equal(ids[8:72] - IMAGE_OFFSET, TOKENS.reshape(-1))
    assert not mask[:8].any() and mask[8:].all()
    assert target_start(ids) == 8


def test_editing_sequence():
    ref = np.zeros((8, 8), dtype=np.int64)
    ids, mask = build_sequence("remove the red circle", ref, TOKENS)

    assert len(ids) == 1 + 4 + 1 + 64 + 1 + 64 + 1
    assert ids[5] == SEP_EDIT and ids[70] == BOI
    assert target_start(ids) == 71
    assert mask.sum() == 65


def test_sequence_invalid_prompt():
    with pytest.raises(GrammarError):
        build_sequence("a purple circle", None, TOKENS)


def test_pad_batch():
    a = build_sequence("a circle", None, TOKENS)
    b = build_sequence("a red circle", None, TOKENS)
    ids, mask = pad_batch([a, b])
    assert ids.shape == (2, len(b[0]))
    assert ids[0, -1] == PAD and not mask[0, -1]
    np.testing.assert_array_equal(ids[1], b[0])


def test_forward_shapes(ar_model):
    ids, _ = build_sequence("a circle", None, TOKENS)
    logits, hidden = ar_model.forward(ids[None])
    assert logits.shape == (1, len(ids), VOCAB_SIZE)
    assert hidden.shape == (1, len(ids), 16)


def test_forward_too_long(ar_model):
    with pytest.raises(UsageError):
        ar_model.forward(np.zeros((1, ar_model.config.max_len + 1), dtype=np.int64))


def test_forward_is_causal(ar_model):
    ids, _ = build_sequence("a red circle", None, TOKENS)
    other = ids.copy()
    other[20:] = IMAGE_OFFSET
    with no_grad():
        a, _ = ar_model.forward(ids[None])
        b, _ = ar_model.forward(other[None])
    np.testing.assert_allclose(a.data[0, :20], b.data[0, :20], atol=1e-6)


def test_ce_loss_of_uniform_logits():
    ids, mask = build_sequence("a circle", None, TOKENS)
    logits = Tensor(np.zeros((1, len(ids), VOCAB_SIZE)))
    assert ce_loss(logits, ids[None], mask[None]).item() == pytest.approx(math.log(VOCAB_SIZE), rel=1e-5)


def test_ce_loss_of_perfect_logits():
    ids, mask = build_sequence("a circle", None, TOKENS)
    logits = np.full((1, len(ids), VOCAB_SIZE), -30.0)
    logits[0, np.arange(len(ids) - 1), ids[1:]] = 30.0
    assert ce_loss(Tensor(logits), ids[None], mask[None]).item() == pytest.approx(0.0, abs=1e-6)


def test_ce_loss_ignores_the_prompt():
    ids, mask = build_sequence("a circle", None, TOKENS)
    logits = np.random.default_rng(0).standard_normal((1, len(ids), VOCAB_SIZE))
    changed = logits.copy()
    # The logits at position i predict token i + 1 : the prompt predictions end before BOI
    changed[0, :2] = 0
    a = ce_loss(Tensor(logits), ids[None], mask[None]).item()
    b = ce_loss(Tensor(changed), ids[None], mask[None]).item()
    assert a == b


def test_ar_gradients():
    with precision(np.float64):
        model = ARModel(ARConfig(d_model=8, layers=1, heads=2, max_len=80, codebook_size=16), np.random.default_rng(0))
        ids, mask = build_sequence("a circle", None, TOKENS)
        params = dict(model.named_parameters())

        def loss(_):
            return ce_loss(model.forward(ids[None])[0], ids[None], mask[None])

        for name in ("head.weight", "blocks.0.attn.q.weight", "embed.weight"):
            assert grad_check(loss, params[name], max_coords=12) < 1e-3


def test_sampling_stays_in_the_codebook(ar_model):
    sample = sample_tokens(ar_model, "a red circle", None, temperature=1.0, seed=0)
    assert sample.tokens.shape == (8, 8)
    assert sample.tokens.min() >= 0 and sample.tokens.max() < ar_model.config.codebook_size
    assert sample.hidden.shape == (64, 16)
    assert sample.ids[-1] == EOI
    assert (sample.logprobs <= 0).all()


def test_sampling_is_seeded(ar_model):
    a = sample_tokens(ar_model, "a red circle", None, 1.0, seed=3)
    b = sample_tokens(ar_model, "a red circle", None, 1.0, seed=3)
    np.testing.assert_array_equal(a.tokens, b.tokens)


def test_batch_rows_only_depend_on_their_seed(ar_model):
    batch = sample_batch(ar_model, "two blue squares", None, 1.0, seeds=[5, 6, 7])
    alone = sample_tokens(ar_model, "two blue squares", None, 1.0, seed=6)
    np.testing.assert_array_equal(batch[1].tokens, alone.tokens)


def test_greedy_matches_low_temperature(ar_model):
    greedy = sample_tokens(ar_model, "a square", None, 1.0, seed=0, greedy=True)
    cold = sample_tokens(ar_model, "a square", None, 1e-6, seed=1)
    np.testing.assert_array_equal(greedy.tokens, cold.tokens)


def test_logprob_of_matches_sampling(ar_model):
    sample = sample_tokens(ar_model, "a green triangle", None, 0.8, seed=2)
    with no_grad():
        logp = logprob_of(ar_model, sample.ids[None], sample.loss_mask[None], temperature=0.8)
    assert logp.shape == (1, 64)
    np.testing.assert_allclose(logp.data[0], sample.logprobs, atol=1e-4)


def test_editing_sampling(ar_model):
    ref = np.ones((8, 8), dtype=np.int64)
    sample = sample_tokens(ar_model, "remove the red circle", ref, 1.0, seed=0)
    assert SEP_EDIT in sample.ids
    assert target_start(sample.ids) == 71
