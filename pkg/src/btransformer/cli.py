"""``btransformer`` command line: gen-data, train, eval, predict.

Exit codes: 0 success, 2 flag/config error, 3 data or checkpoint error,
4 training divergence, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import checkpoint_bytes, load_checkpoint
from .config import ModelConfig, load_config
from .data import build_dataset, build_pairs, dumps_corpus, generate_synthetic, load_corpus
from .embeddings import Vocabulary, load_precomputed
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    TrainingDivergedError,
)
from .head import predict_labels
from .model import BTransformer
from .training import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5

logger = logging.getLogger("btransformer")


class UsageError(Exception):
    pass


def write_outputs(out_dir: str, files: Dict[str, bytes]) -> None:
    """Write every file via temp-and-rename once all contents are ready."""
    os.makedirs(out_dir, exist_ok=True)
    staged = []
    try:
        for name, payload in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            staged.append((tmp, os.path.join(out_dir, name)))
    except OSError:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _parse_split(text: str) -> List[float]:
    try:
        ratios = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--split must be comma-separated numbers, got {text!r}") from None
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise UsageError(f"--split needs three non-negative ratios summing to 1, got {text!r}")
    return ratios


def _threshold(value: str) -> float:
    t = float(value)
    if not 0.0 < t < 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie strictly between 0 and 1, got {value}")
    return t


def _base_config(args) -> ModelConfig:
    config = load_config(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ratios = _parse_split(args.split)
    config = _base_config(args)
    num_classes = args.classes if args.classes is not None else config.num_classes
    if args.docs <= 0 or args.entities <= 0 or num_classes <= 0:
        raise UsageError("--docs, --entities and --classes must be positive")
    docs = generate_synthetic(args.docs, args.entities, num_classes, config.seed)
    n_train = int(np.floor(ratios[0] * args.docs + 1e-9))
    n_dev = int(np.floor(ratios[1] * args.docs + 1e-9))
    splits = {
        "train.jsonl": docs[:n_train],
        "dev.jsonl": docs[n_train:n_train + n_dev],
        "test.jsonl": docs[n_train + n_dev:],
    }
    write_outputs(args.out, {k: dumps_corpus(v).encode("utf-8") for k, v in splits.items()})
    for name, part in splits.items():
        print(f"{name}: {len(part)} documents")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _base_config(args)
    overrides = {}
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if args.decay is not None:
        overrides["lr_decay"] = args.decay
    if args.threshold is not None:
        overrides["threshold"] = args.threshold
    if overrides:
        config = config.replace(**overrides)
    _require_file(args.train, "training corpus")
    _require_file(args.dev, "dev corpus")
    if args.embeddings:
        _require_file(args.embeddings, "embedding file")

    train_docs = load_corpus(args.train, config.num_classes)
    dev_docs = load_corpus(args.dev, config.num_classes)
    vocab = Vocabulary.build(d.text for d in train_docs)
    embeddings = load_precomputed(args.embeddings, config.max_seq_len) if args.embeddings else None
    model = BTransformer.init(config, vocab, embeddings)
    rng = np.random.default_rng([config.seed, 1])
    train_set = build_dataset(train_docs, vocab, config, rng)
    dev_set = build_dataset(dev_docs, vocab, config.replace(neg_ratio=0.0))
    print(f"train pairs: {len(train_set)}  dev pairs: {len(dev_set)}  vocab: {len(vocab)}", flush=True)

    def report(r):
        print(f"epoch {r.epoch:3d}  train_loss {r.train_loss:.6f}  val_loss {r.val_loss:.6f}  "
              f"val_macro_f1 {r.val_macro_f1:.4f}", flush=True)

    result = train(model, train_set, dev_set, config, on_epoch=report)
    final_blob = checkpoint_bytes(model)
    result.restore_best(model)
    write_outputs(args.out, {
        "curve.csv": result.log.to_csv().encode("utf-8"),
        "final.ckpt": final_blob,
        "best.ckpt": checkpoint_bytes(model),
    })
    best = result.log.records[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch} (val_macro_f1 {best.val_macro_f1:.4f}); "
          f"stopped after epoch {result.stopped_epoch}")
    return EXIT_OK


def _load_for_inference(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "corpus")
    model = load_checkpoint(args.checkpoint)
    threshold = args.threshold
    if threshold is None and args.config:
        threshold = load_config(args.config).threshold
    if threshold is None:
        threshold = model.config.threshold
    docs = load_corpus(args.data, model.config.num_classes)
    return model, docs, threshold


def cmd_eval(args) -> int:
    model, docs, threshold = _load_for_inference(args)
    dataset = build_dataset(docs, model.vocab, model.config.replace(neg_ratio=0.0))
    if len(dataset) == 0:
        raise DataError("corpus yields no entity pairs to evaluate")
    from .metrics import macro_f1

    loss, _, probs = evaluate(model, dataset, model.config.batch_size, threshold)
    _, report = macro_f1(predict_labels(probs, threshold), dataset.labels)
    text = report.to_text() + f"bce_loss {loss!r}\n"
    write_outputs(args.out, {"report.txt": text.encode("utf-8"), "report.csv": report.to_csv().encode("utf-8")})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, docs, threshold = _load_for_inference(args)
    lines = []
    for doc in docs:
        samples = build_pairs(doc, model.vocab, model.config)
        if not samples:
            continue
        ids = np.stack([s.token_ids for s in samples])
        mask = np.stack([s.mask for s in samples])
        width = int(mask.sum(axis=1).max())
        probs = model.predict_proba(ids[:, :width], mask[:, :width])
        for s, p in zip(samples, probs):
            labels = [int(c) for c in np.flatnonzero(p >= threshold)]
            lines.append(json.dumps({"doc": s.doc_id, "head": s.head_id, "tail": s.tail_id,
                                     "labels": labels, "probs": [float(x) for x in p]}))
    payload = "".join(line + "\n" for line in lines).encode("utf-8")
    write_outputs(args.out, {"predictions.jsonl": payload})
    print(f"{len(lines)} predictions written to {os.path.join(args.out, 'predictions.jsonl')}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="key = value config file (unknown keys are rejected)")
    shared.add_argument("--seed", type=int, metavar="INT", help="random seed; overrides the config value")
    shared.add_argument("--out", metavar="DIR", required=True, help="output directory")

    parser = argparse.ArgumentParser(
        prog="btransformer", description="Transformer-encoder multi-label relation extraction."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug information")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[shared], help="write synthetic train/dev/test JSONL splits")
    p.add_argument("--docs", type=int, default=100, help="number of documents (default 100)")
    p.add_argument("--entities", type=int, default=4, help="entities per document (default 4)")
    p.add_argument("--classes", type=int, help="relation classes (default: num_classes from the config)")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,dev,test ratios summing to 1 (default 0.8,0.1,0.1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[shared], help="train a model; writes best.ckpt, final.ckpt, curve.csv")
    p.add_argument("--train", required=True, metavar="PATH", help="training corpus (JSONL)")
    p.add_argument("--dev", required=True, metavar="PATH", help="dev corpus (JSONL) used for early stopping")
    p.add_argument("--embeddings", metavar="PATH", help="precomputed embedding file (default: trainable table)")
    p.add_argument("--max-epochs", type=int, help="override max_epochs")
    p.add_argument("--decay", choices=["constant", "linear"], help="learning-rate tail after warm-up")
    p.add_argument("--threshold", type=_threshold, help="decision threshold in (0, 1) for dev macro-F1")
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "evaluate a checkpoint; writes report.txt and report.csv"),
        ("predict", cmd_predict, "predict relations for every entity pair; writes predictions.jsonl"),
    ):
        p = sub.add_parser(name, parents=[shared], help=text)
        p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint file")
        p.add_argument("--data", required=True, metavar="PATH", help="corpus (JSONL); relations may be empty")
        p.add_argument("--threshold", type=_threshold, help="decision threshold in (0, 1) (default from checkpoint)")
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
