from dataclasses import dataclass

import pytest
import torch

from lipspot.config import resolve
from lipspot.phonedict import PhoneticDictionary, VocabularySplit, split_vocabulary
from lipspot.synthcorpus import CorpusLayout, SynthConfig, generate_corpus, synthetic_lexicon
from lipspot.training import load_corpus_features

torch.set_num_threads(1)

ACCEPTANCE_LINES = pytest.StashKey[list]()

TINY_OVERRIDES = {
    "kws.d_feat": 8,
    "kws.d_v": 8,
    "kws.d_s": 4,
    "g2p.hidden_size": 8,
    "g2p.embedding_size": 16,
    "train.total_epochs": 4,
    "train.phase1_epochs": 2,
    "train.lr_decay_every": 2,
    "train.batch_videos": 8,
}


@dataclass
class TinyCorpus:
    cfg: dict
    dictionary: PhoneticDictionary
    split: VocabularySplit
    records: list
    features: dict
    root: object


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = resolve("desk-scale", TINY_OVERRIDES)
    d = synthetic_lexicon(80, seed=2)
    split = split_vocabulary(d, (0.7, 0.1, 0.2), seed=0)
    sc = SynthConfig(2, 0.1, (3, 5), cfg["kws.d_feat"])
    records = generate_corpus(split, d, 48, sc, 0, root, CorpusLayout(0.2, 0.2, 10))
    return TinyCorpus(cfg, d, split, records, load_corpus_features(records, root), root)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
