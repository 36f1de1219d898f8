"""The full keyword-spotting model: G2P keyword encoder plus KWS network."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .checkpoint import CheckpointError, arrays_to_state, state_to_arrays
from .g2p import G2PConfig, G2PModel, batch_graphemes
from .kwsnet import KWSNet, KWSNetConfig
from .phonedict import GraphemeSet, PhoneSet

# parameter groups, in the order used by the curriculum
GROUPS = ("g2p", "kws.layer1", "kws.layer2", "kws.ff", "kws.seq", "kws.videoemb")


def g2p_config(cfg: dict, graphemes: GraphemeSet, phones: PhoneSet) -> G2PConfig:
    alphabet = cfg["g2p.target_alphabet"]
    n_targets = phones.size if alphabet == "phonemes" else graphemes.size
    return G2PConfig(
        n_graphemes=graphemes.size,
        n_targets=n_targets,
        hidden_size=cfg["g2p.hidden_size"],
        embedding_size=cfg["g2p.embedding_size"],
        target_alphabet=alphabet,
        decoder_enabled=cfg["g2p.decoder_enabled"],
    )


def kws_config(cfg: dict, d_r: int, backend: str = "feed-forward") -> KWSNetConfig:
    return KWSNetConfig(
        d_feat=cfg["kws.d_feat"],
        d_v=cfg["kws.d_v"],
        d_r=d_r,
        d_s=cfg["kws.d_s"],
        dropout_p=cfg["kws.dropout_p"],
        lrelu_slope=cfg["kws.lrelu_slope"],
        backend=backend,
        bn_momentum=cfg["kws.bn_momentum"],
    )


class KWSModel(nn.Module):
    def __init__(self, cfg: dict, graphemes: GraphemeSet, phones: PhoneSet, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.config = dict(cfg)
        self.graphemes = graphemes
        self.phones = phones
        self.g2p = G2PModel(g2p_config(cfg, graphemes, phones))
        self.kws = KWSNet(kws_config(cfg, self.g2p.cfg.d_r))

    @property
    def backend(self) -> str:
        return self.kws.backend

    def set_backend(self, backend: str) -> None:
        self.kws.set_backend(backend)

    def embed(self, words: Sequence[str]):
        g, lengths = batch_graphemes(words, self.graphemes)
        return self.g2p.encode(g, lengths)

    def vocabulary(self) -> dict:
        return {"graphemes": list(self.graphemes.symbols), "phones": list(self.phones.symbols)}

    def to_arrays(self):
        return state_to_arrays(self.state_dict())

    def load_arrays(self, arrays) -> None:
        ref = self.state_dict()
        self.load_state_dict(arrays_to_state(arrays, ref))

    def set_frozen(self, groups: Sequence[str]) -> None:
        """Freeze the named parameter groups (and their batch-norm statistics)."""
        for name, p in self.named_parameters():
            p.requires_grad_(not any(name.startswith(g + ".") for g in groups))
        for name, m in self.named_modules():
            if hasattr(m, "frozen"):
                m.frozen = any(name.startswith(g + ".") or name == g for g in groups)

    @classmethod
    def from_checkpoint(cls, ckpt) -> "KWSModel":
        vocab = ckpt.extra.get("vocabulary")
        if vocab is None:
            raise CheckpointError("checkpoint carries no vocabulary")
        model = cls(ckpt.config, GraphemeSet(tuple(vocab["graphemes"])), PhoneSet(tuple(vocab["phones"])))
        model.load_arrays({k: v for k, v in ckpt.arrays.items() if not k.startswith("optim.")})
        model.set_backend(ckpt.extra.get("backend", "sequence"))
        return model
