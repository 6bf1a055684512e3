"""Caption tokenization and the joint text/image embedding space.

The text encoder produces a sentence vector (the global condition driving
image content) and per-word features (the local condition driving attention
refinement). A small convolutional image encoder maps images into the same
space; the two are trained jointly with a contrastive matching loss instead
of a separate pretraining phase.
"""

import torch
import torch.nn as nn

from .errors import ConfigError

PAD_ID = 0
UNK_ID = 1

SENTENCE_DIM = 64
WORD_DIM = 64
MAX_WORDS = 8


class Vocabulary:
    """Token ids with pad=0 and unknown=1 reserved.

    Ordering is deterministic: descending frequency, ties broken
    lexicographically.
    """

    def __init__(self, tokens):
        self.id_to_token = ["<pad>", "<unk>"] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, text, max_words=MAX_WORDS):
        """Tokenize a caption into padded ids. Returns (ids, valid_length)."""
        words = tokenize(text)
        if not words:
            raise ConfigError(f"caption {text!r} has no tokens")
        words = words[:max_words]
        ids = [self.token_to_id.get(w, UNK_ID) for w in words]
        ids = ids + [PAD_ID] * (max_words - len(ids))
        return ids, len(words)

    def save(self, path):
        # one token per line, line number = id - 2 (specials are implicit)
        with open(path, "w") as f:
            for t in self.id_to_token[2:]:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            tokens = [line.strip() for line in f if line.strip()]
        return cls(tokens)


def tokenize(text):
    return text.lower().split()


def build_vocabulary(corpus):
    """Count tokens over a caption list and assign dense ids."""
    if not corpus:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts = {}
    for caption in corpus:
        words = tokenize(caption)
        if not words:
            raise ConfigError(f"caption {caption!r} has no tokens")
        for w in words:
            counts[w] = counts.get(w, 0) + 1
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered)


def encode_captions(captions, vocab, max_words=MAX_WORDS):
    """Batch of captions -> (ids LongTensor (B, T), lengths LongTensor (B,))."""
    ids, lengths = [], []
    for c in captions:
        i, n = vocab.encode(c, max_words)
        ids.append(i)
        lengths.append(n)
    return torch.tensor(ids, dtype=torch.long), torch.tensor(lengths, dtype=torch.long)


class TextEncoder(nn.Module):
    """Token embedding plus one bidirectional recurrent layer.

    Word features are the per-step hidden states (padded steps zeroed); the
    sentence vector is the mean over valid steps.
    """

    def __init__(self, vocab_size, sentence_dim=SENTENCE_DIM, word_dim=WORD_DIM):
        super().__init__()
        if word_dim % 2:
            raise ConfigError("word feature width must be even for the bidirectional split")
        self.vocab_size = vocab_size
        self.sentence_dim = sentence_dim
        self.word_dim = word_dim
        self.embed = nn.Embedding(vocab_size, word_dim, padding_idx=PAD_ID)
        self.rnn = nn.GRU(word_dim, word_dim // 2, batch_first=True, bidirectional=True)
        self.to_sentence = nn.Linear(word_dim, sentence_dim)

    def forward(self, token_ids, lengths):
        """token_ids: (B, T) ids; lengths: (B,) valid word counts.

        Returns (sentence (B, D_g), words (B, D_l, T)).
        """
        if token_ids.max().item() >= self.vocab_size or token_ids.min().item() < 0:
            raise ConfigError(
                f"token id out of range [0, {self.vocab_size}): {token_ids.max().item()}"
            )
        mask = (
            torch.arange(token_ids.shape[1], device=token_ids.device)[None, :]
            < lengths[:, None]
        )
        emb = self.embed(token_ids)                      # (B, T, D)
        steps, _ = self.rnn(emb)                         # (B, T, D)
        steps = steps * mask[:, :, None]
        sentence = steps.sum(dim=1) / lengths[:, None].clamp(min=1)
        sentence = self.to_sentence(sentence)            # (B, D_g)
        words = steps.transpose(1, 2)                    # (B, D_l, T)
        return sentence, words


class ImageEncoder(nn.Module):
    """Small convolutional tower mapping images to the caption space."""

    def __init__(self, out_dim=SENTENCE_DIM, width=32):
        super().__init__()
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 4, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.proj = nn.Linear(width * 4, out_dim)

    def forward(self, images):
        # images: (B, 3, H, W) in [-1, 1]
        feats = self.net(images)
        pooled = feats.mean(dim=(2, 3))
        return self.proj(pooled)
