"""Command-line entry point: gen-data, train, predict, eval.

Also owns the run configuration schema and the binary checkpoint format
(magic "S2G1", JSON header, little-endian float64 payloads).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import struct
import sys
from dataclasses import dataclass

import numpy as np

from .corpus import (DatasetError, SyntheticSpec, evaluate_predictions,
                     generate_synthetic, load_distractor_dataset,
                     save_distractor_dataset)
from .encoder import EncoderConfig, init_encoder_params
from .reader import Reader, ReaderConfig
from .retriever import Retriever, RetrieverConfig
from .tensor import Tensor
from .textproc import SPECIALS, Vocab
from .training import (TrainingDivergedError, evaluate_retriever, predict_pipeline,
                       train_reader, train_retriever)

CHECKPOINT_MAGIC = b"S2G1"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    # encoder
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 512
    dropout_rate: float = 0.1
    # retriever
    top_k_cascade: int = 3
    n_refine_layers: int = 2
    use_refine: bool = True
    use_cascade: bool = True
    use_reformulation: bool = True
    # reader
    t_layers: int = 2
    lambda1: float = 2.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    max_answer_len: int = 30
    k_max: int = 14
    sent_threshold: float = 0.5
    use_sentence_transformer: bool = True
    use_answer_transformer: bool = True
    # training
    lr: float = 3e-3
    batch_size: int = 4
    epochs: int = 4
    seed: int = 42

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DatasetError(f"unknown config keys: {unknown}")
        return cls(**d)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.d_model, self.n_heads, self.n_layers,
                             self.d_ff, self.max_len, self.dropout_rate)

    def retriever_config(self) -> RetrieverConfig:
        return RetrieverConfig(self.top_k_cascade,
                               n_refine_layers=self.n_refine_layers,
                               use_refine=self.use_refine,
                               use_cascade=self.use_cascade,
                               use_reformulation=self.use_reformulation)

    def reader_config(self) -> ReaderConfig:
        return ReaderConfig(self.t_layers, self.lambda1, self.lambda2, self.lambda3,
                            self.max_answer_len, self.k_max, self.sent_threshold,
                            self.use_sentence_transformer, self.use_answer_transformer)


def build_retriever(config: RunConfig, vocab: Vocab) -> Retriever:
    rng = np.random.default_rng(config.seed)
    enc_config = config.encoder_config(len(vocab))
    return Retriever(init_encoder_params(enc_config, rng), enc_config,
                     config.retriever_config(), vocab, rng)


def build_reader(config: RunConfig, vocab: Vocab) -> Reader:
    rng = np.random.default_rng(config.seed)
    enc_config = config.encoder_config(len(vocab))
    return Reader(init_encoder_params(enc_config, rng), enc_config,
                  config.reader_config(), vocab, rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: RunConfig, vocab: Vocab,
                    params: dict[str, Tensor]) -> None:
    names = sorted(params)
    header = json.dumps({
        "kind": kind,
        "config": dataclasses.asdict(config),
        "vocab": vocab.id_to_token,
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[str, RunConfig, Vocab, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen))
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    config = RunConfig.from_dict(header["config"])
    return header["kind"], config, Vocab(header["vocab"]), tensors


def _restore(model, tensors: dict[str, np.ndarray], path) -> None:
    params = model.all_params()
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise CheckpointError(f"{path}: parameter names do not match model ({missing[:6]}...)")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = tensors[name].astype(np.float64)


def load_retriever(path) -> Retriever:
    kind, config, vocab, tensors = load_checkpoint(path)
    if kind != "retriever":
        raise CheckpointError(f"{path}: expected a retriever checkpoint, got {kind!r}")
    model = build_retriever(config, vocab)
    _restore(model, tensors, path)
    return model


def load_reader(path) -> Reader:
    kind, config, vocab, tensors = load_checkpoint(path)
    if kind != "reader":
        raise CheckpointError(f"{path}: expected a reader checkpoint, got {kind!r}")
    model = build_reader(config, vocab)
    _restore(model, tensors, path)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            config = RunConfig.from_dict(json.load(f))
    for key in ("lr", "batch_size", "epochs", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(config, key, val)
    return config


def build_vocab(examples) -> Vocab:
    texts = []
    for ex in examples:
        texts.append(ex.question)
        for _, sents in ex.context:
            texts.extend(sents)
    return Vocab.build(texts)


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(seed=args.seed, n_examples=args.n_train,
                         fraction_comparison=args.fraction_comparison,
                         max_fillers=args.max_fillers, entity_seed=args.seed)
    save_distractor_dataset(generate_synthetic(spec), f"{args.out}/train.json")
    dev_spec = dataclasses.replace(spec, seed=args.seed + 1, n_examples=args.n_dev)
    save_distractor_dataset(generate_synthetic(dev_spec), f"{args.out}/dev.json")
    print(json.dumps({"event": "gen-data", "train": args.n_train, "dev": args.n_dev,
                      "seed": args.seed}))
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    train_set = load_distractor_dataset(args.data)
    dev_set = load_distractor_dataset(args.dev) if args.dev else None
    vocab = build_vocab(train_set)
    kwargs = dict(lr=config.lr, batch_size=config.batch_size, epochs=config.epochs,
                  seed=config.seed, logger=print)
    if args.task == "retriever":
        model = build_retriever(config, vocab)
        train_retriever(model, train_set, dev_set, **kwargs)
    else:
        model = build_reader(config, vocab)
        train_reader(model, train_set, dev_set, **kwargs)
    save_checkpoint(args.out, args.task, config, vocab, model.all_params())
    print(json.dumps({"event": "checkpoint", "task": args.task, "path": args.out}))
    return 0


def cmd_predict(args) -> int:
    retriever = load_retriever(args.retriever_ckpt)
    reader = load_reader(args.reader_ckpt)
    if retriever.vocab.id_to_token != reader.vocab.id_to_token:
        raise CheckpointError("retriever and reader checkpoints use different vocabularies")
    dataset = load_distractor_dataset(args.data)
    answers, sp, _, dump = predict_pipeline(retriever, reader, dataset, args.threads)
    doc = {"answer": {k: answers[k] for k in sorted(answers)},
           "sp": {k: [list(pair) for pair in sp[k]] for k in sorted(sp)}}
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=True, separators=(",", ":"), sort_keys=True)
    if args.retrieval_out:
        with open(args.retrieval_out, "w", encoding="utf-8") as f:
            for record in dump:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps({"event": "predict", "n": len(dataset), "out": args.out}))
    return 0


def cmd_eval(args) -> int:
    with open(args.pred, encoding="utf-8") as f:
        pred = json.load(f)
    gold = load_distractor_dataset(args.gold)
    selections = None
    if args.retrieval:
        selections = {}
        with open(args.retrieval, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                selections[rec["id"]] = rec["selected"]
        missing = sorted({ex.id for ex in gold} - set(selections))
        if missing:
            raise DatasetError(f"retrieval dump missing ids: {missing[:10]}")
    report = evaluate_predictions(pred["answer"], pred["sp"], gold, selections)
    print(report.table())
    out = args.out or (args.pred + ".metrics.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report.as_dict(), f, sort_keys=True, indent=2)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2g", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic train/dev corpus")
    g.add_argument("out", help="output directory")
    g.add_argument("--n-train", dest="n_train", type=int, default=2000)
    g.add_argument("--n-dev", dest="n_dev", type=int, default=200)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--fraction-comparison", type=float, default=0.2)
    g.add_argument("--max-fillers", type=int, default=3)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the retriever or the reader")
    t.add_argument("task", choices=["retriever", "reader"])
    t.add_argument("data", help="training set (distractor schema)")
    t.add_argument("--dev", help="dev set for per-epoch metrics")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="run retrieval + reading on a dataset")
    p.add_argument("retriever_ckpt")
    p.add_argument("reader_ckpt")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--retrieval-out", dest="retrieval_out",
                   help="line-delimited per-question stage logits dump")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    e = sub.add_parser("eval", help="score a prediction file against gold")
    e.add_argument("pred")
    e.add_argument("gold")
    e.add_argument("--retrieval", help="retrieval dump from predict, for retrieval metrics")
    e.add_argument("--out", help="metric report path (default: <pred>.metrics.json)")
    e.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetError, CheckpointError, TrainingDivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
