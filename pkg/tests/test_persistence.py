import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lipspot.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from lipspot.config import ConfigError, first_difference, parse_overrides, resolve, PRESETS
from lipspot.manifest import ManifestError, ManifestRecord, parse_record, read_manifest, write_manifest
from lipspot.model import KWSModel


@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 5)),
              elements=st.floats(width=32, allow_nan=False)))
@settings(max_examples=40, deadline=None)
def test_checkpoint_round_trip_is_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "a.ckpt"
    ck = Checkpoint({"kws.d_v": 8, "note": "x"}, {"w": arr, "s": np.float32(3.5).reshape(())}, epoch=4,
                    extra={"log": [{"epoch": 1, "val_eer": 0.25}]})
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.config == ck.config and back.epoch == 4 and back.extra == ck.extra
    assert back.arrays["w"].tobytes() == arr.tobytes() and back.arrays["s"].shape == ()


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", Checkpoint({}, {"w": np.ones((2, 3), np.float32)}))
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XX" + data[2:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")


def test_model_round_trip_and_shape_validation(tiny_corpus, tmp_path):
    tc = tiny_corpus
    model = KWSModel(tc.cfg, tc.dictionary.graphemes(), tc.dictionary.phones, seed=0)
    ck = Checkpoint(tc.cfg, model.to_arrays(), extra={"vocabulary": model.vocabulary(), "backend": "sequence"})
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = KWSModel.from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    for (k, a), b in zip(model.state_dict().items(), back.state_dict().values()):
        assert torch.equal(a, b), k
    assert back.backend == "sequence"
    wrong = {**tc.cfg, "kws.d_v": 16}
    with pytest.raises(CheckpointError, match="shape"):
        KWSModel(wrong, tc.dictionary.graphemes(), tc.dictionary.phones).load_arrays(ck.arrays)


def test_parameter_names_follow_groups(tiny_corpus):
    tc = tiny_corpus
    names = KWSModel(tc.cfg, tc.dictionary.graphemes(), tc.dictionary.phones).to_arrays()
    prefixes = {"g2p", "kws.layer1", "kws.layer2", "kws.ff", "kws.seq", "kws.videoemb"}
    assert {n.split(".")[0] if n.startswith("g2p") else ".".join(n.split(".")[:2]) for n in names} == prefixes


def test_manifest_round_trip(tmp_path):
    recs = [
        ManifestRecord("v1", "features/v1.lspf", 10, ["HELLO", "WORLD"], [(0, 4), (5, 9)], "test", "NF"),
        ManifestRecord("v2", "features/v2.lspf", 3, ["HI"], None, "pretrain", None),
    ]
    write_manifest(tmp_path / "m.tsv", recs)
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["video_id", "feature_path", "n_frames", "transcript", "boundaries", "subset", "view"]
    assert lines[1] == "v1\tfeatures/v1.lspf\t10\tHELLO WORLD\t0:4 5:9\ttest\tNF"
    assert read_manifest(tmp_path / "m.tsv") == recs
    assert recs[0].word_boundaries("WORLD") == [(5, 9)]


@pytest.mark.parametrize("line, match", [
    ("v\tf\t10\tA B\t0:4 5:10\ttest\t-", "outside"),
    ("v\tf\t10\tA B\t0:4\ttest\t-", "boundaries for"),
    ("v\tf\t10\tA\t-\tholdout\t-", "subset"),
    ("v\tf\t10\tA\t-\ttest\tSIDE", "view"),
    ("v\tf\tten\tA\t-\ttest\t-", "line 3"),
    ("v\tf\t10\tA\t-", "fields"),
])
def test_manifest_validation(line, match):
    with pytest.raises(ManifestError, match=match):
        parse_record(line, 3)


def test_manifest_duplicate_ids(tmp_path):
    (tmp_path / "m.tsv").write_text("v\tf\t3\tA\t-\ttest\t-\nv\tg\t3\tB\t-\ttest\t-\n")
    with pytest.raises(ManifestError, match="duplicate"):
        read_manifest(tmp_path / "m.tsv")


def test_presets_enumerate_the_same_keys():
    assert set(PRESETS["paper-faithful"]) == set(PRESETS["desk-scale"])
    full = resolve("paper-faithful")
    assert (full["kws.d_v"], full["g2p.hidden_size"], full["g2p.embedding_size"], full["kws.d_s"]) == (256, 64, 128, 16)
    assert (full["train.lr"], full["train.total_epochs"], full["train.batch_videos"]) == (2e-3, 100, 40)
    assert resolve("desk-scale")["train.total_epochs"] <= 30


def test_overrides_are_coerced_and_checked():
    cfg = resolve("desk-scale", parse_overrides(["train.lr=0.01", "g2p.decoder_enabled=false", "kws.d_v=32"]))
    assert cfg["train.lr"] == 0.01 and cfg["g2p.decoder_enabled"] is False and cfg["kws.d_v"] == 32
    with pytest.raises(ConfigError, match="unknown"):
        resolve("desk-scale", {"kws.width": 3})
    with pytest.raises(ConfigError):
        resolve("desk-scale", {"kws.d_v": "wide"})
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    with pytest.raises(ConfigError):
        resolve("huge")


def test_first_difference():
    assert first_difference({"a": 1, "b": 2}, {"a": 1, "b": 2}) is None
    assert first_difference({"a": 1, "b": 2, "c": 0}, {"a": 1, "b": 3, "c": 1}) == "b"
    assert first_difference({"a": 1}, {"a": 1, "z": 0}) == "z"
