"""Keyword spotting network: BiLSTM stack with frame-level keyword fusion.

Layout (parameter prefixes in brackets)::

    X --BN--dropout--BiLSTM--proj--> Y                               [layer1]
    [Y; r] --BN--dropout--BiLSTM--proj--> Z                          [layer2]
    Z --> feed-forward head (temporal sum)              -> p          [ff]
    Z --> sequence head (BiLSTM, max/argmax)            -> p, t_hat   [seq]
    X --> utterance embedding ++ r --> feed-forward     -> p          [videoemb]

All sequence tensors are batch-first and right-padded; ``lengths`` holds the
number of valid frames of each row. Padded frames never influence outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

BACKENDS = ("feed-forward", "sequence", "video-embedding")


@dataclass(frozen=True)
class KWSNetConfig:
    d_feat: int = 256
    d_v: int = 256
    d_r: int = 128
    d_s: int = 16
    dropout_p: float = 0.2
    lrelu_slope: float = 0.01
    backend: str = "feed-forward"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if min(self.d_feat, self.d_v, self.d_r, self.d_s) < 1:
            raise ValueError("all dimensions must be positive")
        if self.d_v < 4:
            raise ValueError("d_v must be at least 4 (the feed-forward head uses d_v/4)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")

    def with_backend(self, backend: str) -> "KWSNetConfig":
        return replace(self, backend=backend)


@dataclass
class KWSOutput:
    p: torch.Tensor
    logit: torch.Tensor
    t_hat: torch.Tensor | None = None
    y: torch.Tensor | None = None


def length_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T).unsqueeze(0) < torch.as_tensor(lengths).unsqueeze(1)


def sequence_dropout_mask(shape, p: float, generator: torch.Generator | None = None,
                          training: bool = True, dtype=torch.float32) -> torch.Tensor:
    """One inverted-dropout mask per sequence, shared by all its time steps.

    ``shape`` is (B, T, F); the result has shape (B, 1, F) and broadcasts
    over time.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    B, _, Fdim = shape
    if not training or p == 0.0:
        return torch.ones(B, 1, Fdim, dtype=dtype)
    keep = torch.rand(B, 1, Fdim, generator=generator) >= p
    return keep.to(dtype) / (1.0 - p)


def element_dropout(x: torch.Tensor, p: float, generator: torch.Generator | None, training: bool) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class MaskedBatchNorm(nn.Module):
    """Batch normalisation over (batch x valid time steps) per channel.

    When ``frozen`` is set the running statistics are used and not updated,
    as in evaluation mode.
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.unsqueeze(-1).to(x.dtype)
        if self.training and not self.frozen:
            n = m.sum()
            mean = (x * m).sum(dim=(0, 1)) / n
            var = (((x - mean) ** 2) * m).sum(dim=(0, 1)) / n
            with torch.no_grad():
                unbiased = var * n / (n - 1).clamp(min=1)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach().to(self.running_mean.dtype))
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.detach().to(self.running_var.dtype))
        else:
            mean, var = self.running_mean, self.running_var
        out = (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias
        return out * m


def reverse_within_length(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each (B, T, d) row over its first ``lengths[b]`` frames; padding stays put."""
    T = x.shape[1]
    t = torch.arange(T).unsqueeze(0)
    L = torch.as_tensor(lengths).reshape(-1, 1)
    idx = torch.where(t < L, L - 1 - t, t)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


class BiLSTM(nn.Module):
    """Bidirectional LSTM over right-padded batches.

    Two unidirectional LSTMs run on the padded tensor directly; the backward one
    sees each sequence reversed within its own length. Packed sequences give the
    same result but their backward pass is several times slower on CPU.
    """

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.hidden_size = d_hidden
        self.fwd = nn.LSTM(d_in, d_hidden, batch_first=True)
        self.bwd = nn.LSTM(d_in, d_hidden, batch_first=True)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """[forward; backward] outputs, zero on padded frames."""
        lengths = torch.as_tensor(lengths)
        hf, _ = self.fwd(x)
        hb, _ = self.bwd(reverse_within_length(x, lengths))
        out = torch.cat([hf, reverse_within_length(hb, lengths)], dim=-1)
        return out * length_mask(lengths, x.shape[1]).unsqueeze(-1).to(out.dtype)


class BiLSTMLayer(nn.Module):
    """Bidirectional LSTM whose concatenated outputs are projected to ``d_out``."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int | None = None):
        super().__init__()
        self.lstm = BiLSTM(d_in, d_hidden)
        self.proj = nn.Linear(2 * d_hidden, d_out if d_out is not None else d_hidden, bias=False)

    def recurrent(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Concatenated [forward; backward] outputs, zero on padded frames."""
        return self.lstm(x, lengths)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self.proj(self.recurrent(x, lengths))


def bilstm_layer(layer: BiLSTMLayer, x: torch.Tensor, lengths=None) -> torch.Tensor:
    """Apply ``layer`` to one (T, d) sequence or a padded (B, T, d) batch."""
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
    if x.shape[1] < 1:
        raise ValueError("sequence must contain at least one frame")
    out = layer(x, lengths)
    return out[0] if single else out


def fuse_keyword(Y: torch.Tensor, r: torch.Tensor, d_r: int | None = None) -> torch.Tensor:
    """Concatenate the keyword embedding to every frame: [y_t; r].

    ``Y`` is (T, d_v) or (B, T, d_v); ``r`` is (d_r,) or (B, d_r).
    """
    if d_r is not None and r.shape[-1] != d_r:
        raise ValueError(f"keyword embedding has size {r.shape[-1]}, expected {d_r}")
    if Y.dim() == 2:
        if r.dim() != 1:
            raise ValueError("a single sequence takes a single embedding")
        return torch.cat([Y, r.unsqueeze(0).expand(Y.shape[0], -1)], dim=-1)
    if r.dim() == 1:
        r = r.unsqueeze(0).expand(Y.shape[0], -1)
    if r.shape[0] != Y.shape[0]:
        raise ValueError(f"{r.shape[0]} embeddings for {Y.shape[0]} sequences")
    return torch.cat([Y, r.unsqueeze(1).expand(-1, Y.shape[1], -1)], dim=-1)


class InputStack(nn.Module):
    def __init__(self, cfg: KWSNetConfig):
        super().__init__()
        self.bn = MaskedBatchNorm(cfg.d_feat, cfg.bn_momentum)
        self.bilstm = BiLSTMLayer(cfg.d_feat, cfg.d_v)


class FusedStack(nn.Module):
    def __init__(self, cfg: KWSNetConfig):
        super().__init__()
        self.bn = MaskedBatchNorm(cfg.d_v + cfg.d_r, cfg.bn_momentum)
        self.bilstm = BiLSTMLayer(cfg.d_v + cfg.d_r, cfg.d_v)


class FeedForwardHead(nn.Module):
    def __init__(self, d_in: int, d_v: int, slope: float):
        super().__init__()
        self.slope = slope
        self.w = nn.Linear(d_in, d_v // 2, bias=False)
        self.hidden = nn.Linear(d_v // 2, d_v // 4)
        self.out = nn.Linear(d_v // 4, 1)

    def aggregate(self, Z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """v = sum over valid t of LReLU(W z_t)."""
        a = F.leaky_relu(self.w(Z), self.slope)
        return (a * mask.unsqueeze(-1).to(a.dtype)).sum(dim=1)

    def classify(self, v: torch.Tensor, dropout_p: float, generator, training: bool) -> torch.Tensor:
        v = element_dropout(v, dropout_p, generator, training)
        h = F.leaky_relu(self.hidden(v), self.slope)
        return self.out(h).squeeze(-1)


class SequenceHead(nn.Module):
    def __init__(self, d_v: int, d_s: int, slope: float):
        super().__init__()
        self.slope = slope
        self.w = nn.Linear(d_v, d_s, bias=False)
        self.bilstm = BiLSTM(d_s, d_s)
        self.out = nn.Linear(2 * d_s, 1)

    def frame_scores(self, Z: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        S = F.leaky_relu(self.w(Z), self.slope)
        H = self.bilstm(S, lengths)
        return self.out(H).squeeze(-1)


def masked_max(y: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Max and first argmax of each row of ``y`` over its valid prefix."""
    lengths = torch.as_tensor(lengths)
    if int(lengths.min()) < 1:
        raise ValueError("valid_length must be at least 1")
    if int(lengths.max()) > y.shape[-1]:
        raise ValueError("valid_length exceeds the sequence length")
    mask = length_mask(lengths, y.shape[-1])
    masked = y.masked_fill(~mask, float("-inf"))
    # torch returns the first index among ties
    return masked.max(dim=-1)


def seq_classify_scores(y: torch.Tensor, valid_length: int | torch.Tensor) -> KWSOutput:
    """Posterior and localisation from a frame-score track (1-D or batched)."""
    single = y.dim() == 1
    yb = y.unsqueeze(0) if single else y
    lengths = torch.as_tensor(valid_length).reshape(-1).expand(yb.shape[0])
    top, idx = masked_max(yb, lengths)
    out = KWSOutput(torch.sigmoid(top), top, idx, yb)
    if single:
        return KWSOutput(out.p[0], out.logit[0], out.t_hat[0], y)
    return out


class VideoEmbeddingHead(nn.Module):
    """Baseline: one utterance-level embedding concatenated with ``r``."""

    def __init__(self, cfg: KWSNetConfig):
        super().__init__()
        self.bn = MaskedBatchNorm(cfg.d_feat, cfg.bn_momentum)
        self.lstm = BiLSTM(cfg.d_feat, cfg.d_v)
        self.proj = nn.Linear(2 * cfg.d_v, cfg.d_v, bias=False)
        self.classifier = FeedForwardHead(cfg.d_v + cfg.d_r, cfg.d_v, cfg.lrelu_slope)

    def embed(self, X: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        lengths = torch.as_tensor(lengths)
        out = self.lstm(X, lengths)
        d = self.lstm.hidden_size
        last = out[torch.arange(X.shape[0]), lengths - 1, :d]
        first = out[:, 0, d:]
        return self.proj(torch.cat([last, first], dim=-1))


class KWSNet(nn.Module):
    def __init__(self, cfg: KWSNetConfig):
        super().__init__()
        self.cfg = cfg
        self.backend = cfg.backend
        self.layer1 = InputStack(cfg)
        self.layer2 = FusedStack(cfg)
        self.ff = FeedForwardHead(cfg.d_v, cfg.d_v, cfg.lrelu_slope)
        self.seq = SequenceHead(cfg.d_v, cfg.d_s, cfg.lrelu_slope)
        self.videoemb = VideoEmbeddingHead(cfg)

    def set_backend(self, backend: str) -> None:
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend

    def encode_videos(self, X, lengths, generator=None) -> torch.Tensor:
        """Layer 1 over a batch of videos: (V, T, d_feat) -> (V, T, d_v)."""
        mask = length_mask(lengths, X.shape[1])
        x = self.layer1.bn(X, mask)
        x = x * sequence_dropout_mask(x.shape, self.cfg.dropout_p, generator, self.training, x.dtype)
        return self.layer1.bilstm(x, lengths)

    def fused_outputs(self, Y, lengths, r, generator=None) -> torch.Tensor:
        """Layer 2 over per-pair layer-1 outputs and keyword embeddings."""
        mask = length_mask(lengths, Y.shape[1])
        fused = self.layer2.bn(fuse_keyword(Y, r, self.cfg.d_r), mask)
        fused = fused * sequence_dropout_mask(fused.shape, self.cfg.dropout_p, generator, self.training, fused.dtype)
        return self.layer2.bilstm(fused, lengths)

    def forward(self, X: torch.Tensor, lengths: torch.Tensor, r: torch.Tensor,
                pair_video: torch.Tensor | None = None, generator: torch.Generator | None = None) -> KWSOutput:
        """Score keyword/video pairs.

        ``X`` holds V padded videos, ``r`` holds P keyword embeddings and
        ``pair_video[i]`` is the video index of pair ``i`` (identity if omitted).
        """
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        if pair_video is None:
            pair_video = torch.arange(X.shape[0])
        pair_lengths = lengths[pair_video]
        if self.backend == "video-embedding":
            head = self.videoemb
            mask = length_mask(lengths, X.shape[1])
            x = head.bn(X, mask)
            x = x * sequence_dropout_mask(x.shape, self.cfg.dropout_p, generator, self.training, x.dtype)
            e = head.embed(x, lengths)[pair_video]
            v = F.leaky_relu(head.classifier.w(torch.cat([e, r], dim=-1)), self.cfg.lrelu_slope)
            logit = head.classifier.classify(v, self.cfg.dropout_p, generator, self.training)
            return KWSOutput(torch.sigmoid(logit), logit)
        Y = self.encode_videos(X, lengths, generator)[pair_video]
        Z = self.fused_outputs(Y, pair_lengths, r, generator)
        if self.backend == "feed-forward":
            v = self.ff.aggregate(Z, length_mask(pair_lengths, Z.shape[1]))
            logit = self.ff.classify(v, self.cfg.dropout_p, generator, self.training)
            return KWSOutput(torch.sigmoid(logit), logit)
        y = self.seq.frame_scores(Z, pair_lengths)
        return seq_classify_scores(y, pair_lengths)


def ff_classify(net: KWSNet, Z: torch.Tensor, lengths=None, generator=None) -> torch.Tensor:
    """Posterior of the feed-forward head for layer-2 outputs ``Z``."""
    Zb = Z.unsqueeze(0) if Z.dim() == 2 else Z
    if lengths is None:
        lengths = torch.full((Zb.shape[0],), Zb.shape[1], dtype=torch.long)
    v = net.ff.aggregate(Zb, length_mask(lengths, Zb.shape[1]))
    p = torch.sigmoid(net.ff.classify(v, net.cfg.dropout_p, generator, net.training))
    return p[0] if Z.dim() == 2 else p


def seq_classify(net: KWSNet, Z: torch.Tensor, valid_length) -> KWSOutput:
    Zb = Z.unsqueeze(0) if Z.dim() == 2 else Z
    lengths = torch.as_tensor(valid_length).reshape(-1).expand(Zb.shape[0])
    if int(lengths.min()) < 1:
        raise ValueError("valid_length must be at least 1")
    # the recurrence only sees the valid prefix
    y = net.seq.frame_scores(Zb, lengths)
    out = seq_classify_scores(y, lengths)
    if Z.dim() == 2:
        return KWSOutput(out.p[0], out.logit[0], out.t_hat[0], out.y[0])
    return out


def video_embedding_classify(net: KWSNet, X: torch.Tensor, r: torch.Tensor, generator=None) -> torch.Tensor:
    single = X.dim() == 2
    Xb = X.unsqueeze(0) if single else X
    rb = r.unsqueeze(0) if r.dim() == 1 else r
    if Xb.shape[1] < 1:
        raise ValueError("sequence must contain at least one frame")
    saved = net.backend
    net.backend = "video-embedding"
    try:
        out = net(Xb, torch.full((Xb.shape[0],), Xb.shape[1], dtype=torch.long), rb, generator=generator)
    finally:
        net.backend = saved
    return out.p[0] if single else out.p
