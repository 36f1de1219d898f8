import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lipspot.config import resolve
from lipspot.g2p import auxiliary_loss
from lipspot.checkpoint import load_checkpoint
from lipspot.model import GROUPS, KWSModel
from lipspot.phonedict import parse_dictionary
from lipspot.training import (
    ConfigMismatchError,
    OptimizerSchedule,
    TrainingError,
    binary_cross_entropy,
    build_pairs,
    curriculum,
    curriculum_from_config,
    joint_loss,
    minibatch_loss,
    phase_for,
    train,
)

WORDS = {f"W{i:02d}": i % 7 + 2 for i in range(40)}
DICT = parse_dictionary(f"{w}  " + " ".join(["AA1"] + ["B"] * (n - 1)) for w, n in WORDS.items())


def random_minibatch(rng, n_videos=10):
    words = sorted(WORDS)
    return [(f"v{i}", [words[j] for j in rng.integers(0, len(words), size=rng.integers(1, 7))])
            for i in range(n_videos)]


def test_three_keywords_three_negatives():
    videos = [("a", ["W06", "W13", "W20"]), ("b", ["W27", "W34"]), ("c", ["W05", "W12"])]
    pairs = build_pairs(videos, WORDS, DICT, 4, np.random.default_rng(0))
    a = [p for p in pairs if p.video_id == "a"]
    assert sorted(p.keyword for p in a if p.label == 1) == ["W06", "W13", "W20"]
    assert sum(p.label == 0 for p in a) == 3


def test_no_eligible_keywords_gives_no_pairs():
    videos = [("a", ["W00", "W07"]), ("b", ["W14"])]  # two phonemes each
    assert build_pairs(videos, WORDS, DICT, 4, np.random.default_rng(0)) == []


def test_small_keyword_list_falls_back_to_replacement(caplog):
    videos = [("a", ["W06", "W13", "W20"]), ("b", ["W27"])]
    with caplog.at_level(logging.WARNING):
        pairs = build_pairs(videos, WORDS, DICT, 4, np.random.default_rng(0))
    negs = [p.keyword for p in pairs if p.video_id == "a" and p.label == 0]
    assert negs == ["W27"] * 3
    assert "replacement" in caplog.text


def test_pair_balance_and_hygiene_over_1000_minibatches():
    rng = np.random.default_rng(123)
    train_vocab = {w for i, w in enumerate(sorted(WORDS)) if i % 5}
    held_out = set(WORDS) - train_vocab
    for _ in range(1000):
        videos = random_minibatch(rng)
        n_p = int(rng.integers(1, 7))
        pairs = build_pairs(videos, train_vocab, DICT, n_p, rng)
        transcripts = dict(videos)
        for vid, _ in videos:
            mine = [p for p in pairs if p.video_id == vid]
            assert sum(p.label for p in mine) == sum(1 - p.label for p in mine)
        for p in pairs:
            assert p.keyword not in held_out
            assert DICT[p.keyword].phoneme_count >= n_p
            assert (p.keyword in transcripts[p.video_id]) == bool(p.label)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_pair_balance_property(seed):
    rng = np.random.default_rng(seed)
    pairs = build_pairs(random_minibatch(rng, int(rng.integers(1, 12))), WORDS, DICT, 4, rng)
    by_video = {}
    for p in pairs:
        by_video.setdefault(p.video_id, []).append(p.label)
    assert all(sum(v) * 2 == len(v) for v in by_video.values())


def test_joint_loss_closed_forms():
    assert float(joint_loss(1.0, torch.tensor([1 - 1e-7], dtype=torch.float64))) == pytest.approx(0.0, abs=1e-6)
    p = torch.tensor([0.3, 0.8], dtype=torch.float64)
    labels = torch.tensor([0.0, 1.0], dtype=torch.float64)
    lp = torch.log_softmax(torch.randn(2, 3, 70, dtype=torch.float64), -1)
    tgt = torch.zeros(2, 3, dtype=torch.long)
    assert torch.equal(joint_loss(labels, p, lp, tgt, alpha_w=0.0), binary_cross_entropy(labels, p).mean())
    uniform = torch.full((1, 4, 70), -math.log(70), dtype=torch.float64)
    value = joint_loss(torch.tensor([0.0]), torch.tensor([0.5], dtype=torch.float64), uniform,
                       torch.tensor([[5, 9, 2, 69]]), alpha_w=1.0)
    assert float(value) == pytest.approx(math.log(2) + math.log(70), abs=1e-12)


def test_bce_clamps_extremes():
    for label, p in ((1.0, 0.0), (0.0, 1.0)):
        v = float(binary_cross_entropy(torch.tensor(label), torch.tensor(p, dtype=torch.float64)))
        assert math.isfinite(v) and v == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_full_scale_curriculum_and_schedule():
    phases = curriculum()
    covered = [e for ph in phases for e in range(ph.first_epoch, ph.last_epoch + 1)]
    assert covered == list(range(1, 101))
    p1, p21, p22 = phase_for(phases, 20), phase_for(phases, 21), phase_for(phases, 22)
    assert (p1.backend, p1.n_p, p1.alpha_w, p1.datasets) == ("feed-forward", 4, 1.0, ("train",))
    assert (p21.backend, p21.n_p, p21.alpha_w, p21.datasets) == ("sequence", 6, 0.1, ("train", "pretrain"))
    assert set(p21.frozen) == set(GROUPS) - {"kws.seq"}
    assert p22.frozen == () and p22.backend == "sequence"
    sched = OptimizerSchedule()
    for e, lr in zip((1, 21, 41, 61, 81), (2e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4)):
        assert sched.lr(e) == lr
    for e in range(1, 101):
        assert sched.lr(e) == 2e-3 * 2.0 ** (-((e - 1) // 20))


def test_video_embedding_curriculum_has_no_freeze():
    phases = curriculum_from_config(resolve("paper-faithful", {"model.final_backend": "video-embedding"}))
    assert all(ph.backend == "video-embedding" and not ph.frozen for ph in phases)


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_frozen_epoch_step_leaves_frozen_groups_bit_identical(tiny_corpus):
    tc = tiny_corpus
    model = KWSModel(tc.cfg, tc.dictionary.graphemes(), tc.dictionary.phones, seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    phase = phase_for(curriculum_from_config(tc.cfg), tc.cfg["train.phase1_epochs"] + 1)
    model.set_backend(phase.backend)
    model.set_frozen(phase.frozen)
    model.train()
    before = _snapshot(model)
    videos = [(r.video_id, r.transcript) for r in tc.records if r.subset == "train"][:8]
    pairs = build_pairs(videos, tc.split.train, tc.dictionary, 4, np.random.default_rng(0))
    mb = minibatch_loss(model, pairs, tc.features, tc.dictionary, phase.alpha_w, torch.Generator().manual_seed(0))
    opt.zero_grad()
    mb.total.backward()
    opt.step()
    after = _snapshot(model)
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed and all(k.startswith("kws.seq.") for k in changed)


def test_backend_swap_keeps_parameters(tiny_corpus):
    tc = tiny_corpus
    model = KWSModel(tc.cfg, tc.dictionary.graphemes(), tc.dictionary.phones, seed=0)
    before = _snapshot(model)
    model.set_backend("sequence")
    assert all(torch.equal(v, model.state_dict()[k]) for k, v in before.items())


def test_gradient_routing(tiny_corpus):
    tc = tiny_corpus
    model = KWSModel(tc.cfg, tc.dictionary.graphemes(), tc.dictionary.phones, seed=1)
    videos = [(r.video_id, r.transcript) for r in tc.records if r.subset == "train"][:8]
    pairs = build_pairs(videos, tc.split.train, tc.dictionary, 4, np.random.default_rng(0))
    mb = minibatch_loss(model, pairs, tc.features, tc.dictionary, 0.0, None)
    mb.total.backward()
    for name, p in model.g2p.named_parameters():
        if name.startswith(("decoder", "output", "target_embed")):
            assert p.grad is None or not p.grad.any()
    assert model.g2p.to_embedding.weight.grad.abs().sum() > 0

    # the auxiliary term alone reaches the encoder but never the classifier
    model.zero_grad()
    words = sorted({p.keyword for p in pairs})
    _, init = model.embed(words)
    targets = [model.phones.encode(tc.dictionary[w].phonemes) for w in words]
    auxiliary_loss(model.g2p, init, targets).backward()
    assert model.g2p.encoder.weight_ih_l0.grad.abs().sum() > 0
    assert all(p.grad is None or not p.grad.any() for p in model.kws.parameters())


def test_training_is_deterministic_and_resumable(tiny_corpus, tmp_path):
    tc = tiny_corpus
    a = train(tc.cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path / "a", seed=3)
    b = train(tc.cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path / "b", seed=3)
    losses = [(r["loss_v"], r["loss_w"]) for r in a.log_rows]
    assert losses == [(r["loss_v"], r["loss_w"]) for r in b.log_rows]
    assert len(a.log_rows) == tc.cfg["train.total_epochs"]
    assert (tmp_path / "a" / "train_log.csv").read_text().splitlines()[0] == "epoch,phase,lr,loss_v,loss_w,val_eer"

    train(tc.cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path / "c", seed=3, stop_after=2)
    resumed = train(tc.cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path / "c", seed=3,
                    resume=tmp_path / "c" / "last.ckpt")
    assert [(r["loss_v"], r["loss_w"], r["val_eer"]) for r in resumed.log_rows] == \
           [(r["loss_v"], r["loss_w"], r["val_eer"]) for r in a.log_rows]
    last = load_checkpoint(a.last_path).arrays
    again = load_checkpoint(resumed.last_path).arrays
    assert all(np.array_equal(last[k], again[k]) for k in last)

    # selection: best checkpoint is the argmin over final-backend epochs
    final = [r for r in a.log_rows if r["phase"] != "phase1" and not math.isnan(r["val_eer"])]
    if final:
        best = load_checkpoint(a.best_path)
        assert best.extra["val_eer"] == min(r["val_eer"] for r in final)
        assert best.extra["val_eer"] <= final[-1]["val_eer"]


def test_resume_with_different_config_names_the_key(tiny_corpus, tmp_path):
    tc = tiny_corpus
    train(tc.cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path, seed=0, stop_after=1)
    other = {**tc.cfg, "train.lr": 1e-3}
    with pytest.raises(ConfigMismatchError) as err:
        train(other, tc.dictionary, tc.split, tc.records, tc.features, tmp_path, seed=0, resume=tmp_path / "last.ckpt")
    assert err.value.key == "train.lr"


def test_non_finite_loss_aborts(tiny_corpus, tmp_path):
    tc = tiny_corpus
    bad = {k: np.full_like(v, np.nan) for k, v in tc.features.items()}
    with pytest.raises(TrainingError, match="minibatch"):
        train(tc.cfg, tc.dictionary, tc.split, tc.records, bad, tmp_path, seed=0, stop_after=1)


def test_shuffled_labels_change_training(tiny_corpus, tmp_path):
    tc = tiny_corpus
    cfg = {**tc.cfg, "train.shuffle_labels": True}
    a = train(cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path / "s", seed=0, stop_after=1)
    b = train(tc.cfg, tc.dictionary, tc.split, tc.records, tc.features, tmp_path / "n", seed=0, stop_after=1)
    assert a.log_rows[0]["loss_v"] != b.log_rows[0]["loss_v"]


def test_frontend_training_is_rejected(tiny_corpus, tmp_path):
    tc = tiny_corpus
    with pytest.raises(TrainingError, match="precomputed"):
        train({**tc.cfg, "train.train_frontend": True}, tc.dictionary, tc.split, tc.records, tc.features, tmp_path)
