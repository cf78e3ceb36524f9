import json

import numpy as np
import pytest

from s2g.cli import (CHECKPOINT_MAGIC, CheckpointError, RunConfig,
                     build_retriever, build_vocab, load_checkpoint,
                     load_retriever, main, save_checkpoint)
from s2g.corpus import SyntheticSpec, generate_synthetic, save_distractor_dataset

TINY = dict(d_model=16, n_heads=2, n_layers=1, d_ff=32, t_layers=1, max_len=256)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny end-to-end workspace: data, config, trained checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    config = dict(TINY, epochs=1, batch_size=4, seed=42)
    (root / "config.json").write_text(json.dumps(config))
    assert main(["gen-data", str(root), "--n-train", "12", "--n-dev", "6",
                 "--seed", "7"]) == 0
    assert main(["train", "retriever", str(root / "train.json"),
                 "--config", str(root / "config.json"),
                 "--out", str(root / "retr.ckpt")]) == 0
    assert main(["train", "reader", str(root / "train.json"),
                 "--config", str(root / "config.json"),
                 "--out", str(root / "read.ckpt")]) == 0
    return root


class TestGenData:
    def test_files_exist_and_load(self, workdir):
        train = json.loads((workdir / "train.json").read_text())
        dev = json.loads((workdir / "dev.json").read_text())
        assert len(train) == 12 and len(dev) == 6
        assert {r["_id"] for r in train}.isdisjoint({r["_id"] for r in dev})


class TestCheckpoint:
    def test_magic_and_roundtrip(self, workdir):
        raw = (workdir / "retr.ckpt").read_bytes()
        assert raw[:4] == CHECKPOINT_MAGIC
        kind, config, vocab, tensors = load_checkpoint(workdir / "retr.ckpt")
        assert kind == "retriever"
        assert config.d_model == 16
        model = load_retriever(workdir / "retr.ckpt")
        name = sorted(tensors)[0]
        assert np.array_equal(model.all_params()[name].data, tensors[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_kind_mismatch(self, workdir):
        with pytest.raises(CheckpointError, match="expected a retriever"):
            load_retriever(workdir / "read.ckpt")

    def test_save_load_preserves_values(self, tmp_path):
        config = RunConfig(**TINY)
        data = generate_synthetic(SyntheticSpec(seed=1, n_examples=3))
        vocab = build_vocab(data)
        model = build_retriever(config, vocab)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, "retriever", config, vocab, model.all_params())
        back = load_retriever(path)
        for name, p in model.all_params().items():
            assert np.array_equal(p.data, back.all_params()[name].data)

    def test_unknown_config_key_rejected(self):
        with pytest.raises(Exception, match="unknown config keys"):
            RunConfig.from_dict({"no_such_option": 1})


class TestPredictEval:
    def test_full_pipeline(self, workdir):
        pred = workdir / "pred.json"
        assert main(["predict", str(workdir / "retr.ckpt"), str(workdir / "read.ckpt"),
                     str(workdir / "dev.json"), "--out", str(pred),
                     "--retrieval-out", str(workdir / "ret.jsonl")]) == 0
        doc = json.loads(pred.read_text())
        assert set(doc) == {"answer", "sp"}
        assert len(doc["answer"]) == 6
        lines = [json.loads(l) for l in (workdir / "ret.jsonl").read_text().splitlines()]
        assert len(lines) == 6 and all(len(l["selected"]) == 2 for l in lines)
        assert main(["eval", str(pred), str(workdir / "dev.json"),
                     "--retrieval", str(workdir / "ret.jsonl")]) == 0
        metrics = json.loads((workdir / "pred.json.metrics.json").read_text())
        assert set(metrics) >= {"ans_em", "sup_em", "joint_f1", "retrieval_em"}

    def test_determinism_byte_identical(self, workdir):
        a, b = workdir / "p1.json", workdir / "p2.json"
        for out in (a, b):
            assert main(["predict", str(workdir / "retr.ckpt"),
                         str(workdir / "read.ckpt"), str(workdir / "dev.json"),
                         "--out", str(out), "--threads", "1"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_vocab_mismatch_between_checkpoints(self, workdir, tmp_path):
        other = generate_synthetic(SyntheticSpec(seed=99, n_examples=8))
        save_distractor_dataset(other, tmp_path / "other.json")
        assert main(["train", "reader", str(tmp_path / "other.json"),
                     "--config", str(workdir / "config.json"),
                     "--out", str(tmp_path / "read2.ckpt"), "--epochs", "1"]) == 0
        code = main(["predict", str(workdir / "retr.ckpt"), str(tmp_path / "read2.ckpt"),
                     str(workdir / "dev.json"), "--out", str(tmp_path / "p.json")])
        assert code == 1


class TestExitCodes:
    def test_missing_data_file_is_io_error(self, workdir, tmp_path):
        assert main(["train", "retriever", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "x.ckpt")]) == 2

    def test_malformed_data_is_validation_error(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train", "retriever", str(bad),
                     "--out", str(tmp_path / "x.ckpt")]) == 1

    def test_bad_checkpoint_is_validation_error(self, workdir, tmp_path):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"ZZZZ" + b"\0" * 12)
        assert main(["predict", str(junk), str(workdir / "read.ckpt"),
                     str(workdir / "dev.json"), "--out", str(tmp_path / "p.json")]) == 1

    def test_success_is_zero(self, workdir, tmp_path):
        assert main(["gen-data", str(tmp_path), "--n-train", "2", "--n-dev", "1"]) == 0
