"""Module containing the autoregressive model : a decoder-only causal
transformer over a vocabulary mixing the prompt words, the image tokens and a
few special tokens.

Vocabulary layout :

* [0, 64) : words of the prompt grammar
* [64, 320) : image tokens (codebook id + 64)
* 320 to 324 : BOS, BOI, EOI, SEP_EDIT, PAD

Sequences :

* text-to-image : `BOS prompt… BOI img₀…img₆₃ EOI`
* editing / reconstruction : `BOS prompt… SEP_EDIT ref₀…ref₆₃ BOI img₀…img₆₃ EOI`

The loss mask is aligned with the targets : `mask[t]` is `True` when the
token at position `t` is scored (predicted from the logits at `t - 1`).
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax as np_log_softmax

from arflow.codec import N_TOKENS
from arflow.errors import UsageError
from arflow.nn import MLP, Attention, Embedding, KVCache, Linear, Module, RMSNorm, rotary_tables
from arflow.tensor import Tensor, cross_entropy, gather, log_softmax, mul, no_grad
from arflow.tokenizer import TEXT_VOCAB_SIZE, PromptTokenizer


IMAGE_OFFSET = TEXT_VOCAB_SIZE
IMAGE_VOCAB_SIZE = 256
BOS = IMAGE_OFFSET + IMAGE_VOCAB_SIZE
BOI = BOS + 1
EOI = BOS + 2
SEP_EDIT = BOS + 3
PAD = BOS + 4
VOCAB_SIZE = PAD + 1
MAX_LEN = 160
HEAD_INIT_SCALE = 0.02

tokenizer = PromptTokenizer()


@dataclass(frozen=True)
class ARConfig:
    """Shape of the autoregressive model.

    Args:
        d_model (int, optional): Width of the model.
        layers (int, optional): Number of transformer blocks.
        heads (int, optional): Number of attention heads.
        ffn_mult (int, optional): Expansion factor of the feed-forward layers.
        vocab_size (int, optional): Size of the vocabulary.
        max_len (int, optional): Maximum length of a sequence.
        codebook_size (int, optional): Number of image tokens actually used
            (the first ids of the image region).
    """

    d_model: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = VOCAB_SIZE
    max_len: int = MAX_LEN
    codebook_size: int = IMAGE_VOCAB_SIZE

    def __post_init__(self):
        assert self.d_model % self.heads == 0, f"d_model ({self.d_model}) should be divisible by heads ({self.heads})"
        assert self.codebook_size <= IMAGE_VOCAB_SIZE, f"At most {IMAGE_VOCAB_SIZE} image tokens are supported"

    def to_dict(self) -> Dict:
        return asdict(self)


def image_to_vocab(tokens: np.ndarray) -> np.ndarray:
    """Map codebook ids to vocabulary ids."""
    return np.asarray(tokens).reshape(-1) + IMAGE_OFFSET


def build_prefix(prompt: str, ref_tokens: Optional[np.ndarray] = None) -> List[int]:
    """Build the beginning of a sequence, up to and including `BOI`.

    Args:
        prompt (str): Prompt or instruction of the grammar.
        ref_tokens (Optional[np.ndarray], optional): Token grid of the
            reference image (editing and reconstruction).

    Raises:
        GrammarError: If a word of the prompt is not part of the vocabulary.

    Returns:
        Token ids.
    """
    ids = [BOS] + tokenizer.encode(prompt)
    if ref_tokens is not None:
        ids += [SEP_EDIT] + image_to_vocab(ref_tokens).tolist()
    return ids + [BOI]


def build_sequence(
    prompt: str, ref_tokens: Optional[np.ndarray], target_tokens: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Build a full training sequence and its loss mask.

    Args:
        prompt (str): Prompt or instruction of the grammar.
        ref_tokens (Optional[np.ndarray]): Token grid of the reference image,
            `None` for text-to-image.
        target_tokens (np.ndarray): Token grid of the target image.

    Raises:
        GrammarError: If a word of the prompt is not part of the vocabulary.

    Returns:
        Token ids, shape (T,).
        Loss mask, shape (T,) : `True` at the 64 target image tokens and EOI.
    """
    prefix = build_prefix(prompt, ref_tokens)
    ids = np.array(prefix + image_to_vocab(target_tokens).tolist() + [EOI], dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prefix) :] = True
    return ids, mask


def target_start(ids: np.ndarray) -> int:
    """Position of the first target image token (right after the last BOI)."""
    return int(np.flatnonzero(np.asarray(ids) == BOI)[-1]) + 1


def pad_batch(sequences: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack sequences of different lengths, padding the end with `PAD`.

    Args:
        sequences (Sequence[Tuple[np.ndarray, np.ndarray]]): Pairs of
            (token ids, loss mask).

    Returns:
        Token ids of shape (B, T) and loss mask of shape (B, T).
    """
    length = max(len(s) for s, _ in sequences)
    ids = np.full((len(sequences), length), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, (s, m) in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(m)] = m
    return ids, mask


class ARBlock(Module):
    """Pre-norm transformer block with causal self-attention."""

    def __init__(self, config: ARConfig, rng: np.random.Generator):
        self.norm1 = RMSNorm(config.d_model)
        self.attn = Attention(config.d_model, config.heads, rng, causal=True)
        self.norm2 = RMSNorm(config.d_model)
        self.mlp = MLP(config.d_model, config.ffn_mult, rng)

    def __call__(self, x: Tensor, rope, cache: Optional[KVCache] = None) -> Tensor:
        x = x + self.attn(self.norm1(x), rope=rope, cache=cache)
        return x + self.mlp(self.norm2(x))


class ARModel(Module):
    """Decoder-only causal transformer with rotary position encoding.

    Args:
        config (ARConfig): Shape of the model.
        rng (np.random.Generator): Generator used for the initialization.
    """

    def __init__(self, config: ARConfig, rng: np.random.Generator):
        self.config = config
        self.embed = Embedding(config.vocab_size, config.d_model, rng)
        self.blocks = [ARBlock(config, rng) for _ in range(config.layers)]
        self.norm = RMSNorm(config.d_model)
        self.head = Linear(config.d_model, config.vocab_size, rng, bias=False, init_scale=HEAD_INIT_SCALE)
        self.rope = rotary_tables(config.max_len, config.d_model // config.heads)

    def new_cache(self) -> List[KVCache]:
        """Empty key/value caches, one per block."""
        return [KVCache() for _ in self.blocks]

    def forward(self, ids: np.ndarray, caches: Optional[List[KVCache]] = None) -> Tuple[Tensor, Tensor]:
        """Run the model on a batch of sequences.

        Args:
            ids (np.ndarray): Token ids of shape (B, T).
            caches (Optional[List[KVCache]], optional): Caches of the
                previous positions. When given, `ids` are the next positions
                and the caches are extended in place.

        Raises:
            UsageError: If the sequence is longer than the maximum length.

        Returns:
            Logits of shape (B, T, vocab_size).
            Hidden states (final normalized activations) of shape
            (B, T, d_model).
        """
        ids = np.asarray(ids)
        start = 0 if caches is None else caches[0].length
        if start + ids.shape[1] > self.config.max_len:
            raise UsageError(f"Sequence of length {start + ids.shape[1]} exceeds the maximum ({self.config.max_len})")
        cos, sin = self.rope
        rope = (cos[start : start + ids.shape[1]], sin[start : start + ids.shape[1]])

        x = self.embed(ids)
        for i, block in enumerate(self.blocks):
            x = block(x, rope, cache=None if caches is None else caches[i])
        hidden = self.norm(x)
        return self.head(hidden), hidden


def ce_loss(logits: Tensor, ids: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over the scored positions.

    Args:
        logits (Tensor): Logits of shape (B, T, V).
        ids (np.ndarray): Token ids of shape (B, T).
        loss_mask (np.ndarray): Target-aligned mask of shape (B, T).

    Raises:
        ValueError: If the mask selects nothing.

    Returns:
        Scalar tensor.
    """
    return cross_entropy(logits[:, :-1], np.asarray(ids)[:, 1:], np.asarray(loss_mask)[:, 1:])


def image_logprobs(model: ARModel, ids: np.ndarray, temperature: float = 1.0) -> Tuple[Tensor, int]:
    """Teacher-forced log-probabilities of every image token at the target
    positions, under the temperature-scaled distribution restricted to the
    image region (the distribution used for sampling).

    All the sequences of the batch must share the same layout.

    Args:
        model (ARModel): Model.
        ids (np.ndarray): Token ids of shape (B, T).
        temperature (float, optional): Sampling temperature.

    Returns:
        Log-probabilities of shape (B, 64, K).
        Position of the first target image token.
    """
    ids = np.asarray(ids)
    start = target_start(ids[0])
    logits, _ = model.forward(ids[:, : start + N_TOKENS - 1])
    region = logits[:, start - 1 : start - 1 + N_TOKENS, IMAGE_OFFSET : IMAGE_OFFSET + model.config.codebook_size]
    return log_softmax(mul(region, 1.0 / temperature), axis=-1), start


def logprob_of(model: ARModel, ids: np.ndarray, loss_mask: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Teacher-forced log-probability of each target image token.

    Args:
        model (ARModel): Model.
        ids (np.ndarray): Token ids of shape (B, T), same layout for all rows.
        loss_mask (np.ndarray): Loss mask of the sequences (only used to
            check the layout).
        temperature (float, optional): Sampling temperature.

    Returns:
        Log-probabilities of shape (B, 64). Their sum over the positions is
        the log-probability of the image under the model.
    """
    ids = np.asarray(ids)
    logp, start = image_logprobs(model, ids, temperature)
    assert np.asarray(loss_mask)[:, start : start + N_TOKENS].all(), "The loss mask doesn't match the sequence"
    return gather(logp, ids[:, start : start + N_TOKENS] - IMAGE_OFFSET)


@dataclass
class ARSample:
    """Result of the autoregressive sampling of one image.

    Args:
        tokens (np.ndarray): Token grid of shape (8, 8).
        hidden (np.ndarray): Hidden states at the 64 image token positions,
            shape (64, d_model).
        logprobs (np.ndarray): Log-probability of each sampled token under
            the sampling distribution, shape (64,).
        ids (np.ndarray): Full sequence, including EOI.
        loss_mask (np.ndarray): Loss mask of the sequence.
    """

    tokens: np.ndarray
    hidden: np.ndarray
    logprobs: np.ndarray
    ids: np.ndarray
    loss_mask: np.ndarray


def _region_logprobs(logits: np.ndarray, temperature: float, codebook_size: int) -> np.ndarray:
    region = logits[:, IMAGE_OFFSET : IMAGE_OFFSET + codebook_size].astype(np.float64)
    return np_log_softmax(region / temperature, axis=-1)


def sample_batch(
    model: ARModel,
    prompt: str,
    ref_tokens: Optional[np.ndarray],
    temperature: float,
    seeds: Sequence[int],
    greedy: bool = False,
) -> List[ARSample]:
    """Sample one image per seed, all conditioned on the same prompt.

    Tokens outside of the image region are never sampled. Each row draws
    from its own generator, so a row only depends on its seed.

    Args:
        model (ARModel): Model.
        prompt (str): Prompt or instruction.
        ref_tokens (Optional[np.ndarray]): Reference token grid (editing).
        temperature (float): Sampling temperature, > 0.
        seeds (Sequence[int]): One seed per sample.
        greedy (bool, optional): If `True`, pick the most likely token instead
            of sampling (log-probabilities are still reported under the
            temperature-scaled distribution).

    Returns:
        The samples, in the order of the seeds.
    """
    assert temperature > 0, f"The temperature should be positive (got {temperature})"
    prefix = build_prefix(prompt, ref_tokens)
    b, k = len(seeds), model.config.codebook_size
    rngs = [np.random.default_rng(s) for s in seeds]

    tokens = np.zeros((b, N_TOKENS), dtype=np.int64)
    logprobs = np.zeros((b, N_TOKENS))
    hidden = []
    with no_grad():
        caches = model.new_cache()
        logits, _ = model.forward(np.tile(np.array(prefix), (b, 1)), caches)
        last = logits.data[:, -1]
        for i in range(N_TOKENS):
            logp = _region_logprobs(last, temperature, k)
            if greedy:
                choice = logp.argmax(axis=-1)
            else:
                cdf = np.cumsum(np.exp(logp), axis=-1)
                u = np.array([r.random() for r in rngs])
                choice = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1), k - 1)
            tokens[:, i] = choice
            logprobs[:, i] = logp[np.arange(b), choice]

            # Feeding the token also gives its hidden state
            logits, h = model.forward((choice + IMAGE_OFFSET)[:, None], caches)
            last = logits.data[:, -1]
            hidden.append(h.data[:, 0])

    hidden = np.stack(hidden, axis=1)
    samples = []
    for j in range(b):
        ids, mask = build_sequence(prompt, ref_tokens, tokens[j])
        samples.append(ARSample(tokens[j].reshape(8, 8), hidden[j], logprobs[j], ids, mask))
    return samples


def sample_tokens(
    model: ARModel,
    prompt: str,
    ref_tokens: Optional[np.ndarray],
    temperature: float,
    seed: int,
    greedy: bool = False,
) -> ARSample:
    """Sample the 64 image tokens of one image.

    Args:
        model (ARModel): Model.
        prompt (str): Prompt or instruction.
        ref_tokens (Optional[np.ndarray]): Reference token grid (editing).
        temperature (float): Sampling temperature, > 0.
        seed (int): Seed of the draw.
        greedy (bool, optional): Use greedy decoding.

    Returns:
        The sample.
    """
    return sample_batch(model, prompt, ref_tokens, temperature, [seed], greedy=greedy)[0]
