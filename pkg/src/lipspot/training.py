"""Pair construction, the joint loss, the two-phase curriculum and the
training loop with checkpointing and validation-based model selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import first_difference
from .g2p import auxiliary_loss, g2p_loss, select_auxiliary_target
from .kwsnet import length_mask
from .manifest import ManifestRecord
from .metrics import build_query_list, compute_det, compute_eer
from .model import GROUPS, KWSModel
from .phonedict import PhoneticDictionary, VocabularySplit

log = logging.getLogger(__name__)

EPS = 1e-7
LOG_COLUMNS = ("epoch", "phase", "lr", "loss_v", "loss_w", "val_eer")


class TrainingError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    def __init__(self, key: str):
        super().__init__(f"configuration differs from the checkpoint at key {key!r}")
        self.key = key


@dataclass(frozen=True)
class PairExample:
    video_id: str
    keyword: str
    label: int


@dataclass(frozen=True)
class CurriculumPhase:
    first_epoch: int
    last_epoch: int
    datasets: tuple[str, ...]
    n_p: int
    alpha_w: float
    backend: str
    frozen: tuple[str, ...] = ()
    name: str = ""

    def __contains__(self, epoch: int) -> bool:
        return self.first_epoch <= epoch <= self.last_epoch


@dataclass(frozen=True)
class OptimizerSchedule:
    initial_lr: float = 2e-3
    decay_every: int = 20
    factor: float = 0.5
    total_epochs: int = 100
    videos_per_minibatch: int = 40

    def lr(self, epoch: int) -> float:
        return self.initial_lr * self.factor ** ((epoch - 1) // self.decay_every)


def build_pairs(videos: Sequence[tuple[str, Sequence[str]]], train_vocab: Iterable[str],
                dictionary: PhoneticDictionary, n_p: int, rng: np.random.Generator) -> list[PairExample]:
    """Balanced positive/negative pairs for one minibatch.

    Each video is paired with every eligible keyword of its own transcript and
    with as many keywords drawn from the rest of the minibatch keyword list.
    """
    vocab = set(train_vocab)

    def eligible(w):
        entry = dictionary.get(w)
        return w in vocab and entry is not None and entry.phoneme_count >= n_p

    per_video = []
    keywords: dict[str, None] = {}
    for vid, transcript in videos:
        own = list(dict.fromkeys(w for w in transcript if eligible(w)))
        per_video.append((vid, set(transcript), own))
        keywords.update(dict.fromkeys(own))
    keyword_list = sorted(keywords)
    pairs = []
    for vid, words, own in per_video:
        if not own:
            continue
        candidates = [k for k in keyword_list if k not in words]
        if not candidates:
            log.warning("minibatch has no negative keyword for video %s; skipping it", vid)
            continue
        replace = len(candidates) < len(own)
        if replace:
            log.warning("only %d negative keywords for %d positives of video %s; sampling with replacement",
                        len(candidates), len(own), vid)
        negatives = [candidates[i] for i in rng.choice(len(candidates), size=len(own), replace=replace)]
        pairs += [PairExample(vid, k, 1) for k in own]
        pairs += [PairExample(vid, k, 0) for k in negatives]
    return pairs


def binary_cross_entropy(label: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    p = p.clamp(EPS, 1 - EPS)
    label = torch.as_tensor(label, dtype=p.dtype)
    return -(label * torch.log(p) + (1 - label) * torch.log1p(-p))


def joint_loss(label, p, decoder_log_probs=None, target=None, alpha_w: float = 1.0) -> torch.Tensor:
    """Mean over the batch of BCE(label, p) + alpha_w * auxiliary decoder loss."""
    p = torch.as_tensor(p)
    loss = binary_cross_entropy(label, p).mean()
    if decoder_log_probs is not None and alpha_w != 0.0:
        loss = loss + alpha_w * g2p_loss(decoder_log_probs, target)
    return loss


def curriculum(total_epochs: int = 100, phase1_epochs: int = 20, freeze_epochs: int = 1,
               n_p: tuple[int, int] = (4, 6), alpha_w: tuple[float, float] = (1.0, 0.1),
               subsets: tuple[tuple[str, ...], tuple[str, ...]] = (("train",), ("train", "pretrain")),
               final_backend: str = "sequence") -> list[CurriculumPhase]:
    """Phase 1 trains with the feed-forward head; phase 2 swaps in the final
    backend and, for its first ``freeze_epochs`` epochs, trains only that head."""
    if final_backend == "video-embedding":
        return [CurriculumPhase(1, phase1_epochs, subsets[0], n_p[0], alpha_w[0], final_backend, (), "phase1"),
                CurriculumPhase(phase1_epochs + 1, total_epochs, subsets[1], n_p[1], alpha_w[1], final_backend, (), "phase2")]
    backend_group = "kws.seq" if final_backend == "sequence" else "kws.ff"
    frozen = tuple(g for g in GROUPS if g != backend_group)
    phases = [CurriculumPhase(1, phase1_epochs, subsets[0], n_p[0], alpha_w[0], "feed-forward", (), "phase1")]
    if freeze_epochs > 0 and phase1_epochs < total_epochs:
        last = min(total_epochs, phase1_epochs + freeze_epochs)
        phases.append(CurriculumPhase(phase1_epochs + 1, last, subsets[1], n_p[1], alpha_w[1], final_backend, frozen, "phase2-frozen"))
    start = phases[-1].last_epoch + 1
    if start <= total_epochs:
        phases.append(CurriculumPhase(start, total_epochs, subsets[1], n_p[1], alpha_w[1], final_backend, (), "phase2"))
    return phases


def curriculum_from_config(cfg: dict) -> list[CurriculumPhase]:
    return curriculum(
        total_epochs=cfg["train.total_epochs"],
        phase1_epochs=cfg["train.phase1_epochs"],
        freeze_epochs=cfg["train.freeze_epochs"],
        n_p=(cfg["train.n_p_phase1"], cfg["train.n_p_phase2"]),
        alpha_w=(cfg["train.alpha_phase1"], cfg["train.alpha_phase2"]),
        subsets=(tuple(cfg["train.phase1_subsets"].split(",")), tuple(cfg["train.phase2_subsets"].split(","))),
        final_backend=cfg["model.final_backend"],
    )


def schedule_from_config(cfg: dict) -> OptimizerSchedule:
    return OptimizerSchedule(cfg["train.lr"], cfg["train.lr_decay_every"], cfg["train.lr_decay_factor"],
                             cfg["train.total_epochs"], cfg["train.batch_videos"])


def phase_for(phases: Sequence[CurriculumPhase], epoch: int) -> CurriculumPhase:
    for ph in phases:
        if epoch in ph:
            return ph
    raise ValueError(f"epoch {epoch} is outside the curriculum")


def pad_features(arrays: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([a.shape[0] for a in arrays], dtype=torch.long)
    X = torch.zeros(len(arrays), int(lengths.max()), arrays[0].shape[1])
    for i, a in enumerate(arrays):
        X[i, : a.shape[0]] = torch.from_numpy(a)
    return X, lengths


@dataclass
class MinibatchLoss:
    total: torch.Tensor
    loss_v: float
    loss_w: float
    n_pairs: int


def minibatch_loss(model: KWSModel, pairs: Sequence[PairExample], features: dict[str, np.ndarray],
                   dictionary: PhoneticDictionary, alpha_w: float, generator: torch.Generator | None,
                   labels: np.ndarray | None = None) -> MinibatchLoss:
    vids = list(dict.fromkeys(p.video_id for p in pairs))
    vindex = {v: i for i, v in enumerate(vids)}
    kws_list = list(dict.fromkeys(p.keyword for p in pairs))
    kindex = {k: i for i, k in enumerate(kws_list)}
    X, lengths = pad_features([features[v] for v in vids])
    pair_video = torch.tensor([vindex[p.video_id] for p in pairs], dtype=torch.long)
    pair_kw = torch.tensor([kindex[p.keyword] for p in pairs], dtype=torch.long)
    if labels is None:
        labels = np.array([p.label for p in pairs])
    r_u, init = model.embed(kws_list)
    out = model.kws(X, lengths, r_u[pair_kw], pair_video, generator)
    lv = binary_cross_entropy(torch.as_tensor(labels, dtype=out.p.dtype), out.p).mean()
    total = lv
    lw_value = 0.0
    if alpha_w > 0 and model.g2p.cfg.decoder_enabled:
        targets = [select_auxiliary_target(model.g2p.cfg, dictionary[k], model.phones, model.graphemes) for k in kws_list]
        per_kw = auxiliary_loss(model.g2p, init, targets, reduction="none")
        lw = per_kw[pair_kw].mean()
        total = total + alpha_w * lw
        lw_value = float(lw.detach())
    return MinibatchLoss(total, float(lv.detach()), lw_value, len(pairs))


def load_corpus_features(records: Sequence[ManifestRecord], root: str | Path) -> dict[str, np.ndarray]:
    from .frontend import load_precomputed

    root = Path(root)
    return {r.video_id: load_precomputed(root / r.feature_path, r.n_frames, source_id=r.video_id).features
            for r in records}


@dataclass
class TrainResult:
    best_path: Path | None
    last_path: Path
    log_rows: list[dict]
    best_eer: float
    best_epoch: int


def _optim_arrays(model: KWSModel, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out[f"optim.{name}.{key}"] = torch.as_tensor(st[key]).detach().numpy().astype(np.float32)
    return out


def _load_optim(model: KWSModel, opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        key = f"optim.{name}.step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[key]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"optim.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim.{name}.exp_avg_sq"].copy()),
        }


def validation_eer(model: KWSModel, records: Sequence[ManifestRecord], features: dict[str, np.ndarray],
                   queries: Sequence[str]) -> float:
    from .scoring import score_queries

    if not records or not queries:
        return float("nan")
    scored = score_queries(model, queries, records, features)
    curve = compute_det(([s.score for s in scored], [s.label for s in scored]))
    return compute_eer(curve)


def write_log(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _checkpoint(model: KWSModel, opt, cfg: dict, seed: int, epoch: int, extra: dict) -> Checkpoint:
    arrays = model.to_arrays()
    arrays.update(_optim_arrays(model, opt))
    return Checkpoint({**cfg, "seed": seed}, arrays, epoch,
                      {"vocabulary": model.vocabulary(), "backend": model.backend, **extra})


def train(cfg: dict, dictionary: PhoneticDictionary, split: VocabularySplit, records: Sequence[ManifestRecord],
          features: dict[str, np.ndarray], out_dir: str | Path, seed: int = 0, resume: str | Path | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Run the curriculum, writing ``last.ckpt``, ``best.ckpt`` and ``train_log.csv``.

    ``stop_after`` ends the run after that epoch (the checkpoint can be resumed).
    """
    if cfg["train.train_frontend"]:
        raise TrainingError("train.train_frontend needs raw video; this trainer consumes precomputed features")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phases = curriculum_from_config(cfg)
    schedule = schedule_from_config(cfg)
    train_vocab = split.train
    model = KWSModel(cfg, dictionary.graphemes(), dictionary.phones, seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.initial_lr)
    rows: list[dict] = []
    best_eer, best_epoch = math.inf, 0
    start_epoch = 1
    if resume is not None:
        ckpt = load_checkpoint(resume)
        key = first_difference({**cfg, "seed": seed}, ckpt.config)
        if key is not None:
            raise ConfigMismatchError(key)
        model.load_arrays({k: v for k, v in ckpt.arrays.items() if not k.startswith("optim.")})
        _load_optim(model, opt, ckpt.arrays)
        rows = list(ckpt.extra.get("log", []))
        best_eer = ckpt.extra.get("best_eer")
        best_eer = math.inf if best_eer is None else best_eer
        best_epoch = ckpt.extra.get("best_epoch", 0)
        start_epoch = ckpt.epoch + 1

    val_records = [r for r in records if r.subset == "validation"]
    val_queries = build_query_list(val_records, train_vocab, [], dictionary, cfg["train.val_min_phonemes"])
    final_backend = phases[-1].backend
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    end_epoch = schedule.total_epochs if stop_after is None else min(stop_after, schedule.total_epochs)

    for epoch in range(start_epoch, end_epoch + 1):
        phase = phase_for(phases, epoch)
        model.set_backend(phase.backend)
        model.set_frozen(phase.frozen)
        lr = schedule.lr(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([seed, epoch])
        gen = torch.Generator().manual_seed(seed * 100_003 + epoch)
        pool = [r for r in records if r.subset in phase.datasets]
        order = rng.permutation(len(pool))
        model.train()
        sum_v = sum_w = 0.0
        n_batches = 0
        bs = schedule.videos_per_minibatch
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [pool[i] for i in order[start:start + bs]]
            pairs = build_pairs([(r.video_id, r.transcript) for r in batch], train_vocab, dictionary, phase.n_p, rng)
            if not pairs:
                continue
            labels = np.array([p.label for p in pairs])
            if cfg["train.shuffle_labels"]:
                labels = rng.permutation(labels)
            mb = minibatch_loss(model, pairs, features, dictionary, phase.alpha_w, gen, labels)
            if not torch.isfinite(mb.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, minibatch {b} "
                                    f"(videos {batch[0].video_id} .. {batch[-1].video_id})")
            opt.zero_grad(set_to_none=True)
            mb.total.backward()
            if cfg["train.grad_clip"] > 0:
                torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], cfg["train.grad_clip"])
            opt.step()
            sum_v += mb.loss_v
            sum_w += mb.loss_w
            n_batches += 1
        model.set_frozen(())
        model.eval()
        with torch.no_grad():
            val_eer = validation_eer(model, val_records, features, val_queries)
        row = {"epoch": epoch, "phase": phase.name, "lr": lr,
               "loss_v": sum_v / max(n_batches, 1), "loss_w": sum_w / max(n_batches, 1), "val_eer": val_eer}
        rows.append(row)
        log.info("epoch %d %s lr=%.3g loss_v=%.4f loss_w=%.4f val_eer=%.4f", epoch, phase.name, lr,
                 row["loss_v"], row["loss_w"], val_eer)
        # select only among epochs that use the final backend
        candidate = phase.backend == final_backend and not math.isnan(val_eer)
        if candidate and (val_eer < best_eer or best_epoch == 0):
            best_eer, best_epoch = val_eer, epoch
            save_checkpoint(best_path, _checkpoint(model, opt, cfg, seed, epoch, {"val_eer": val_eer}))
        extra = {"log": rows, "best_eer": best_eer if math.isfinite(best_eer) else None, "best_epoch": best_epoch}
        save_checkpoint(last_path, _checkpoint(model, opt, cfg, seed, epoch, extra))
        write_log(out_dir / "train_log.csv", rows)

    if best_epoch == 0 and not best_path.exists():
        best = None
    else:
        best = best_path
    return TrainResult(best, last_path, rows, best_eer, best_epoch)
