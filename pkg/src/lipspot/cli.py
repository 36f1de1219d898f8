"""``lipspot`` command-line interface.

Exit codes: 0 success, 2 input error, 3 output collision, 4 config mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, parse_overrides, resolve
from .frontend import DataError
from .g2p import UnsupportedOperationError
from .manifest import ManifestError, read_manifest
from .metrics import (
    LocalizationRecord,
    TOP_N,
    build_query_list,
    compute_det,
    detection_report,
    localization_accuracy,
    read_scores,
    topn_rates,
    write_det,
    write_scores,
)
from .phonedict import (
    DictionaryParseError,
    EncodingError,
    PhoneticDictionary,
    VocabularySplit,
    encode_word,
    filter_by_min_phonemes,
    load_dictionary,
    move_unused_to_test,
    split_vocabulary,
    write_dictionary,
)
from .training import TrainingError, load_corpus_features

EXIT_RUNTIME = 1
EXIT_INPUT = 2
EXIT_COLLISION = 3
EXIT_MISMATCH = 4

log = logging.getLogger("lipspot")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def configure_threads() -> None:
    """Honour ``LIPSPOT_THREADS``; 0 or 1 selects fully deterministic mode."""
    raw = os.environ.get("LIPSPOT_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"LIPSPOT_THREADS must be an integer, got {raw!r}") from None
    if n <= 1:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(n)


def check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise CommandError(f"{path} exists and is not empty (use --force to overwrite)", EXIT_COLLISION)
    path.mkdir(parents=True, exist_ok=True)


def read_word_list(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [w for line in text.splitlines() for w in line.split()[:1]]


def cmd_prepare(args) -> int:
    d = load_dictionary(args.dict)
    d = filter_by_min_phonemes(d, args.n_p)
    split = split_vocabulary(d, tuple(args.ratios), args.seed)
    if args.used_words:
        split = move_unused_to_test(split, read_word_list(args.used_words))
    split.write(args.out_prefix)
    print(f"train {len(split.train)}")
    print(f"valid {len(split.validation)}")
    print(f"test {len(split.test)}")
    return 0


def cmd_synth(args) -> int:
    from .synthcorpus import CorpusLayout, SynthConfig, generate_corpus, synthetic_lexicon

    cfg = resolve(args.preset, parse_overrides(args.override))
    out = Path(args.out_dir)
    check_out_dir(out, args.force)
    if args.dict:
        d = load_dictionary(args.dict)
    else:
        if cfg["synth.lexicon_words"] < 1:
            raise CommandError("no --dict given and synth.lexicon_words is 0")
        d = synthetic_lexicon(cfg["synth.lexicon_words"], seed=args.seed)
    ratios = (cfg["split.train"], cfg["split.validation"], cfg["split.test"])
    split = split_vocabulary(d, ratios, args.seed)
    n = args.n_utterances if args.n_utterances is not None else cfg["synth.n_utterances"]
    sc = SynthConfig(cfg["synth.frames_per_phoneme"], cfg["synth.noise_sigma"],
                     (cfg["synth.words_min"], cfg["synth.words_max"]), cfg["kws.d_feat"])
    layout = CorpusLayout(cfg["synth.validation_fraction"], cfg["synth.test_fraction"],
                          cfg["synth.n_test_words"] or None, cfg["eval.min_query_phonemes"])
    records = generate_corpus(split, d, n, sc, args.seed, out, layout)
    write_dictionary(out / "lexicon.dict", d)
    split.write(out / "split")
    counts = {s: sum(r.subset == s for r in records) for s in ("train", "validation", "test")}
    print(f"wrote {len(records)} utterances to {out} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args) -> int:
    from .training import ConfigMismatchError, train

    cfg = resolve(args.preset, parse_overrides(args.override))
    out = Path(args.out_dir)
    if args.resume is None:
        check_out_dir(out, args.force)
    d = load_dictionary(args.dict)
    split = VocabularySplit.read(args.split_prefix)
    records = read_manifest(args.manifest)
    features = load_corpus_features(records, Path(args.manifest).parent)
    try:
        res = train(cfg, d, split, records, features, out, seed=args.seed, resume=args.resume,
                    stop_after=args.stop_after)
    except ConfigMismatchError as exc:
        raise CommandError(f"resume config mismatch at key {exc.key!r}", EXIT_MISMATCH) from None
    print(f"best epoch {res.best_epoch} val_eer {res.best_eer:.4f}; checkpoints in {out}")
    return 0


def _load_model(path):
    from .model import KWSModel

    return KWSModel.from_checkpoint(load_checkpoint(path))


def cmd_score(args) -> int:
    from .scoring import score_queries

    model = _load_model(args.checkpoint)
    model.set_backend(args.backend)
    records = [r for r in read_manifest(args.manifest) if r.subset in args.subsets.split(",")]
    if args.view:
        records = [r for r in records if r.view == args.view]
    if not records:
        raise CommandError("no videos left after subset/view filtering")
    dictionary = load_dictionary(args.dict) if args.dict else None
    if args.auto_queries is not None:
        if dictionary is None or args.split_prefix is None:
            raise CommandError("--auto-queries needs --dict and --split-prefix")
        split = VocabularySplit.read(args.split_prefix)
        queries = build_query_list(records, split.train, split.validation, dictionary, args.auto_queries)
    elif args.queries:
        queries = sorted({w.upper() for w in read_word_list(args.queries)})
    else:
        raise CommandError("give --queries or --auto-queries")

    skipped, kept = [], []
    for q in queries:
        try:
            encode_word(q, model.graphemes)
        except EncodingError as exc:
            skipped.append((q, f"unmappable: {exc}"))
            continue
        if dictionary is not None and q not in dictionary:
            # scored anyway; the embedding needs graphemes only
            skipped.append((q, "not in dictionary (scored, no phoneme count)"))
        kept.append(q)
    out = Path(args.out)
    report = out.with_name(out.stem + ".skipped.txt")
    report.write_text("".join(f"{q}\t{why}\n" for q, why in skipped), encoding="utf-8")
    if not kept:
        raise CommandError("no scorable queries")

    features = load_corpus_features(records, Path(args.manifest).parent)
    pairs = score_queries(model, kept, records, features)
    write_scores(out, [p.record() for p in pairs])
    if args.localization:
        with open(args.localization, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["query", "video", "t_hat"])
            for p in pairs:
                w.writerow([p.query, p.video, "" if p.t_hat is None else p.t_hat])
    print(f"scored {len(kept)} queries x {len(records)} videos -> {out}; {len(skipped)} noted in {report}")
    return 0


def read_localization(path) -> dict[tuple[str, str], int]:
    out = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["query", "video", "t_hat"]:
            raise CommandError(f"{path}: row 1: expected header query,video,t_hat")
        for rowno, row in enumerate(reader, start=2):
            try:
                q, v, t = row
                if t:
                    out[(q, v)] = int(t)
            except ValueError:
                raise CommandError(f"{path}: row {rowno}: malformed localization record {row}") from None
    return out


def cmd_eval(args) -> int:
    records = read_scores(args.scores)
    try:
        report: dict = detection_report(records)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    n_values = tuple(int(n) for n in args.top_n.split(",")) if args.top_n else TOP_N
    report["top_n"] = {str(k): v for k, v in topn_rates(records, n_values).items()}
    if args.localization:
        if not args.manifest:
            raise CommandError("--localization needs --manifest for the word boundaries")
        by_id = {r.video_id: r for r in read_manifest(args.manifest)}
        t_hats = read_localization(args.localization)
        loc = []
        for r in records:
            t = t_hats.get((r.query, r.video))
            if r.label == 1 and t is not None and r.video in by_id:
                bounds = by_id[r.video].word_boundaries(r.query)
                if bounds:
                    loc.append(LocalizationRecord(t, bounds, args.tolerance))
        report["localization"] = localization_accuracy(loc) if loc else None
    if args.det:
        write_det(args.det, compute_det(records))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _per_word(words, fn) -> tuple[list[str], int]:
    lines, failures = [], 0
    for w in words:
        try:
            lines.append(fn(w))
        except EncodingError as exc:
            failures += 1
            print(f"error\t{w}\t{exc}", file=sys.stderr)
    if words and failures == len(words):
        raise CommandError("every word failed")
    return lines, failures


def _emit(lines, out) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _words(args) -> list[str]:
    words = list(args.words or [])
    if args.word_list:
        words += read_word_list(args.word_list)
    if not words:
        raise CommandError("no words given")
    return words


@torch.no_grad()
def cmd_embed(args) -> int:
    model = _load_model(args.checkpoint)
    model.eval()

    def row(w):
        encode_word(w, model.graphemes)
        r, _ = model.embed([w])
        return w.upper() + " " + " ".join(repr(float(x)) for x in r[0])

    lines, _ = _per_word(_words(args), row)
    _emit([f"# d_r {model.g2p.cfg.d_r}"] + lines, args.out)
    return 0


@torch.no_grad()
def cmd_g2p(args) -> int:
    model = _load_model(args.checkpoint)
    model.eval()
    if not model.g2p.cfg.decoder_enabled:
        raise CommandError("this checkpoint was trained without a decoder")
    targets = model.phones.symbols if model.g2p.cfg.target_alphabet == "phonemes" else model.graphemes.symbols

    def row(w):
        encode_word(w, model.graphemes)
        _, init = model.embed([w])
        seqs, _ = model.g2p.greedy_decode(init)
        return w.upper() + "  " + " ".join(targets[i] for i in seqs[0])

    lines, _ = _per_word(_words(args), row)
    _emit(lines, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lipspot", description="Visual keyword spotting with text queries.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="filter and split a pronunciation dictionary")
    s.add_argument("--dict", required=True)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.75, 0.05, 0.20), metavar=("TRAIN", "VALID", "TEST"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-p", type=int, default=4, help="minimum phonemes per word")
    s.add_argument("--used-words", help="word list; train/valid words absent from it move to test")
    s.set_defaults(func=cmd_prepare)

    def run_options(s):
        s.add_argument("--preset", default="desk-scale", choices=["desk-scale", "paper-faithful"])
        s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="generate a synthetic feature corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--dict", help="pronunciation dictionary (default: generated lexicon)")
    s.add_argument("--n-utterances", type=int)
    s.add_argument("--force", action="store_true")
    run_options(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--dict", required=True)
    s.add_argument("--split-prefix", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--resume")
    s.add_argument("--stop-after", type=int, help="stop after this epoch")
    s.add_argument("--force", action="store_true")
    run_options(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score queries against videos")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--queries", help="query word list, one per line")
    s.add_argument("--auto-queries", type=int, metavar="MIN_PHONEMES")
    s.add_argument("--dict")
    s.add_argument("--split-prefix")
    s.add_argument("--subsets", default="test")
    s.add_argument("--view", choices=["NF", "MV"])
    s.add_argument("--backend", default="sequence", choices=["sequence", "feed-forward", "video-embedding"])
    s.add_argument("--out", required=True)
    s.add_argument("--localization", help="write per-pair t_hat here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="detection, ranking and localization metrics")
    s.add_argument("--scores", required=True)
    s.add_argument("--manifest")
    s.add_argument("--localization")
    s.add_argument("--tolerance", type=int, default=2)
    s.add_argument("--top-n", default=",".join(map(str, TOP_N)))
    s.add_argument("--det")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    for name, fn, help_ in (("embed", cmd_embed, "export keyword embeddings"),
                            ("g2p", cmd_g2p, "decode pronunciations")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("words", nargs="*")
        s.add_argument("--word-list")
        s.add_argument("--out")
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        configure_threads()
        return args.func(args)
    except CommandError as exc:
        print(f"lipspot {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, DictionaryParseError, ManifestError, DataError, CheckpointError, ConfigError,
            EncodingError, UnsupportedOperationError, ValueError) as exc:
        print(f"lipspot {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingError as exc:
        print(f"lipspot {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
