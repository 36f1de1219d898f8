"""Sequence-to-sequence grapheme-to-phoneme model.

The encoder reads the reversed grapheme sequence; its final cell and output
states are projected to the keyword embedding ``r``, which is projected back to
initialise the decoder. Only the encoder is needed at KWS time; the decoder is a
training regulariser (joint G2P / G2G) and may be disabled altogether.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .phonedict import DictEntry, GraphemeSet, PhoneSet, encode_word

IGNORE = -100
MAX_DECODE_LEN = 48


class UnsupportedOperationError(RuntimeError):
    pass


@dataclass(frozen=True)
class G2PConfig:
    n_graphemes: int
    n_targets: int
    hidden_size: int = 64
    embedding_size: int | None = None
    target_alphabet: str = "phonemes"  # or "graphemes"
    decoder_enabled: bool = True
    symbol_embed_size: int | None = None

    def __post_init__(self):
        if self.target_alphabet not in ("phonemes", "graphemes"):
            raise ValueError(f"unknown target alphabet {self.target_alphabet!r}")
        if self.hidden_size < 1 or self.d_r < 1:
            raise ValueError("sizes must be positive")

    @property
    def d_l(self) -> int:
        return self.hidden_size

    @property
    def d_r(self) -> int:
        return self.embedding_size if self.embedding_size is not None else 2 * self.hidden_size

    @property
    def d_sym(self) -> int:
        return self.symbol_embed_size if self.symbol_embed_size is not None else self.hidden_size

    @property
    def end_index(self) -> int:
        return self.n_targets

    @property
    def start_index(self) -> int:
        return self.n_targets + 1


class G2PModel(nn.Module):
    def __init__(self, cfg: G2PConfig):
        super().__init__()
        self.cfg = cfg
        d_l, d_r = cfg.d_l, cfg.d_r
        # graphemes + pad/sos/eos
        self.grapheme_embed = nn.Embedding(cfg.n_graphemes + 3, cfg.d_sym)
        self.encoder = nn.LSTM(cfg.d_sym, d_l, batch_first=True)
        self.to_embedding = nn.Linear(2 * d_l, d_r, bias=False)
        self.from_embedding = nn.Linear(d_r, 2 * d_l, bias=False)
        if cfg.decoder_enabled:
            # targets + end + start
            self.target_embed = nn.Embedding(cfg.n_targets + 2, cfg.d_sym)
            self.decoder = nn.LSTM(cfg.d_sym, d_l, batch_first=True)
            self.output = nn.Linear(d_l, cfg.n_targets + 1)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.cfg.d_l)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("embed.weight"):
                    p.normal_(0.0, 1.0, generator=generator)
                else:
                    p.uniform_(-bound, bound, generator=generator)

    def encode(self, graphemes: torch.Tensor, lengths: torch.Tensor):
        """Embed a padded batch of grapheme index sequences.

        Returns ``(r, (h_d0, c_d0))`` with ``r`` of shape (B, d_r) and decoder
        states shaped (1, B, d_l) as nn.LSTM expects.
        """
        if graphemes.dim() != 2 or graphemes.shape[0] == 0:
            raise ValueError("expected a non-empty (B, L) grapheme batch")
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        if int(lengths.min()) < 1:
            raise ValueError("grapheme sequences must be non-empty")
        B, L = graphemes.shape
        pos = torch.arange(L).expand(B, L)
        rev = (lengths.unsqueeze(1) - 1 - pos).clamp(min=0)
        reversed_ids = torch.gather(graphemes, 1, rev)
        reversed_ids = torch.where(pos < lengths.unsqueeze(1), reversed_ids, torch.full_like(reversed_ids, self.cfg.n_graphemes))
        x = self.grapheme_embed(reversed_ids)
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, (h, c) = self.encoder(packed)
        h, c = h[0], c[0]
        r = self.to_embedding(torch.cat([c, h], dim=1))
        init = self.from_embedding(r)
        d_l = self.cfg.d_l
        c_d0, h_d0 = init[:, :d_l], init[:, d_l:]
        return r, (h_d0.unsqueeze(0).contiguous(), c_d0.unsqueeze(0).contiguous())

    def _require_decoder(self):
        if not self.cfg.decoder_enabled:
            raise UnsupportedOperationError("this model was built without a decoder")

    def decode(self, init, target: torch.Tensor) -> torch.Tensor:
        """Teacher-forced decoding. ``target`` is (B, T) and already ends with
        the end token; padded positions hold ``IGNORE``. Returns logits (B, T, V+1)."""
        self._require_decoder()
        B = target.shape[0]
        start = torch.full((B, 1), self.cfg.start_index, dtype=torch.long)
        prev = target[:, :-1].clone()
        prev[prev == IGNORE] = self.cfg.end_index
        inputs = torch.cat([start, prev], dim=1)
        out, _ = self.decoder(self.target_embed(inputs), init)
        return self.output(out)

    @torch.no_grad()
    def greedy_decode(self, init, max_len: int = MAX_DECODE_LEN):
        """Greedy decoding. Returns (sequences without end token, per-step posteriors)."""
        self._require_decoder()
        h, c = init
        B = h.shape[1]
        tok = torch.full((B, 1), self.cfg.start_index, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        seqs: list[list[int]] = [[] for _ in range(B)]
        posts: list[list[torch.Tensor]] = [[] for _ in range(B)]
        for _ in range(max_len):
            out, (h, c) = self.decoder(self.target_embed(tok), (h, c))
            probs = torch.softmax(self.output(out[:, 0]), dim=-1)
            nxt = probs.argmax(dim=-1)
            for b in range(B):
                if done[b]:
                    continue
                posts[b].append(probs[b])
                if int(nxt[b]) == self.cfg.end_index:
                    done[b] = True
                else:
                    seqs[b].append(int(nxt[b]))
            if bool(done.all()):
                break
            tok = nxt.unsqueeze(1)
        return seqs, [torch.stack(p) for p in posts]


def pad_sequences(seqs: Sequence[Sequence[int]], fill: int) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    L = int(lengths.max()) if len(seqs) else 0
    out = torch.full((len(seqs), L), fill, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out, lengths


def batch_graphemes(words: Sequence[str], gset: GraphemeSet) -> tuple[torch.Tensor, torch.Tensor]:
    return pad_sequences([encode_word(w, gset) for w in words], gset.pad)


def encode_keyword(model: G2PModel, word: str, gset: GraphemeSet):
    """Keyword embedding and decoder initialisation for a single word."""
    ids = encode_word(word, gset)
    if not ids:
        raise ValueError("cannot encode an empty word")
    g, lengths = pad_sequences([ids], gset.pad)
    r, init = model.encode(g, lengths)
    return r[0], init


def embed_words(model: G2PModel, words: Sequence[str], gset: GraphemeSet) -> torch.Tensor:
    g, lengths = batch_graphemes(words, gset)
    r, _ = model.encode(g, lengths)
    return r


def with_end(seq: Sequence[int], end_index: int) -> list[int]:
    return list(seq) + [end_index]


def decode_pronunciation(model: G2PModel, init, target: Sequence[int] | None = None, max_len: int = MAX_DECODE_LEN):
    """Per-step posteriors for one word.

    With ``target`` (ending in the end token) the decoder is teacher-forced and
    returns a (|target|, V+1) posterior matrix. Without it, greedy decoding runs
    until the end token or ``max_len`` steps and ``(sequence, posteriors)`` is
    returned.
    """
    model._require_decoder()
    if target is None:
        seqs, posts = model.greedy_decode(init, max_len=max_len)
        return seqs[0], posts[0]
    tgt = torch.as_tensor([list(target)], dtype=torch.long)
    return torch.softmax(model.decode(init, tgt), dim=-1)[0]


def g2p_loss(log_probs: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy averaged over each sequence's steps, then over the batch.

    ``log_probs`` is (T, V) or (B, T, V); ``target`` is (T,) or (B, T) with
    ``IGNORE`` marking padding. ``reduction="none"`` returns the per-sequence
    losses.
    """
    if log_probs.dim() == 2:
        log_probs, target = log_probs.unsqueeze(0), torch.as_tensor(target).unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long)
    if log_probs.shape[:2] != target.shape:
        raise ValueError(f"posterior steps {tuple(log_probs.shape[:2])} do not match target {tuple(target.shape)}")
    mask = target != IGNORE
    picked = torch.gather(log_probs, 2, target.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    nll = torch.where(mask, -picked, torch.zeros_like(picked))
    per_seq = nll.sum(1) / mask.sum(1).clamp(min=1).to(nll.dtype)
    return per_seq if reduction == "none" else per_seq.mean()


def select_auxiliary_target(cfg: G2PConfig, entry: DictEntry, phones: PhoneSet, gset: GraphemeSet) -> list[int] | None:
    """Decoder target for a dictionary entry (without end token); ``None`` when
    the model has no decoder."""
    if not cfg.decoder_enabled:
        return None
    if cfg.target_alphabet == "phonemes":
        return phones.encode(entry.phonemes)
    return encode_word(entry.word, gset)


def auxiliary_loss(model: G2PModel, init, targets: Sequence[Sequence[int]], reduction: str = "mean") -> torch.Tensor:
    """Teacher-forced loss for a batch whose decoder initialisation is ``init``."""
    end = model.cfg.end_index
    tgt, _ = pad_sequences([with_end(t, end) for t in targets], IGNORE)
    logits = model.decode(init, tgt)
    return g2p_loss(torch.log_softmax(logits, dim=-1), tgt, reduction=reduction)
