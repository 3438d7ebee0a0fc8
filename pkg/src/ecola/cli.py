"""``ecola`` command line: ``pair``, ``train`` and ``eval`` subcommands.

The config file for ``train`` is a flat ``key = value`` document (``#``
starts a comment). Keys are the :class:`~ecola.trainer.TrainConfig` fields
plus the data keys in :data:`DATA_KEYS`; relative paths resolve against the
config file's directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (DataFormatError, add_reciprocals, index_quadruples, index_timestamps,
                   load_aligned, load_dataset, match_sentences, read_aligned_records,
                   read_documents, read_quadruple_file, write_aligned_records)
from .evaluator import evaluate_both, evaluate_with_text
from .trainer import (Checkpoint, CheckpointError, TrainConfig, models_from_checkpoint,
                      train_joint, train_tke_only)
from .vocab import Vocabulary, build_subword_vocab

logger = logging.getLogger("ecola")

DATA_KEYS = {
    "train": None, "valid": None, "test": None,
    "aligned": None,            # aligned-text JSON lines for the training split
    "out_dir": "runs",
    "vocab_size": 2000,         # subword inventory bound
    "max_tokens": 64,
    "reciprocal": False,
}
PATH_KEYS = ("train", "valid", "test", "aligned", "out_dir")


class CLIError(Exception):
    pass


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config(path: str | Path) -> tuple[TrainConfig, dict]:
    """Read a ``key = value`` file into a train config and the data settings."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CLIError(f"cannot read config {path}: {e.strerror}") from None
    defaults = TrainConfig().to_dict()
    train_kw, data = {}, dict(DATA_KEYS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in defaults:
                train_kw[key] = _coerce(value, defaults[key])
            elif key in DATA_KEYS:
                like = DATA_KEYS[key]
                data[key] = _coerce(value, like) if like is not None else value
            else:
                raise CLIError(f"{path}:{lineno}: unknown config key {key!r}")
        except ValueError as e:
            raise CLIError(f"{path}:{lineno}: bad value for {key!r}: {e}") from None
    for key in PATH_KEYS:
        if data.get(key):
            data[key] = str((path.parent / data[key]).resolve())
    try:
        config = TrainConfig(**train_kw)
    except ValueError as e:
        raise CLIError(f"{path}: {e}") from None
    data["_explicit"] = sorted(train_kw)
    return config, data


# --------------------------------------------------------------------------
# subcommands

def cmd_pair(args) -> int:
    rows = read_quadruple_file(args.quads)
    vocab = Vocabulary(timestamps=index_timestamps((r[3] for r in rows), str(args.quads)))
    quads = index_quadruples(rows, vocab)
    docs = read_documents(args.docs)
    if not docs:
        print("warning: no documents; zero pairs written", file=sys.stderr)
    surface = None
    if args.surface_forms:
        surface = json.loads(Path(args.surface_forms).read_text(encoding="utf-8"))
    pairs, stats = match_sentences(quads, docs, vocab, surface)
    records = []
    for row, sent in pairs:
        s, p, o, t = quads[row]
        records.append({"subject": vocab.entities.label(s), "predicate": vocab.predicates.label(p),
                        "object": vocab.entities.label(o), "timestamp": vocab.timestamps.label(t),
                        "text": sent})
    write_aligned_records(args.out, records)
    print(f"quadruples: {stats.quadruples}  matched: {stats.matched_quadruples}  "
          f"skipped (no surface form): {stats.skipped_quadruples}  pairs: {stats.samples}")
    return 0


def cmd_train(args) -> int:
    config, data = parse_config(args.config)
    if args.workers is not None:
        config = dataclasses.replace(config, workers=args.workers)
    if not data["train"]:
        raise CLIError("config needs a 'train' path")
    ds = load_dataset(data["train"], data["valid"], data["test"])
    vocab = ds.vocab
    train = ds.train
    if data["reciprocal"]:
        train = add_reciprocals(train, vocab)
    out_dir = Path(data["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    validate = None
    if config.eval_every and len(ds.valid):
        from .evaluator import evaluate

        known = ds.all_quadruples()
        validate = lambda m: evaluate(m, ds.valid, known).mrr  # noqa: E731

    if args.tke_only:
        if "lam" in data["_explicit"]:
            print(f"notice: --tke-only ignores lam = {config.lam}")
        res = train_tke_only(config, train, vocab.n_entities, vocab.n_predicates,
                             vocab.n_timestamps, vocab=vocab, out_dir=out_dir, validate=validate)
    else:
        if not data["aligned"]:
            raise CLIError("joint training needs an 'aligned' text file (or use --tke-only)")
        texts = [r["text"] for r in read_aligned_records(data["aligned"])]
        if not texts:
            raise CLIError(f"{data['aligned']}: no aligned records")
        vocab.subwords = build_subword_vocab(texts, data["vocab_size"])
        aligned = load_aligned(data["aligned"], vocab, data["max_tokens"])
        if not aligned:
            raise CLIError("no aligned record matches the training vocabulary")
        res = train_joint(config, aligned, vocab.n_entities, vocab.n_predicates,
                          vocab.n_timestamps, vocab.n_subwords, vocab=vocab, out_dir=out_dir,
                          validate=validate)
    vocab.save(out_dir / "vocab.txt")
    last = res.log[-1] if res.log else None
    print(f"steps: {len(res.log)}  final checkpoint: {out_dir / 'final.ckpt'}")
    if last is not None:
        print(f"last loss: total {last.loss_total:.6f}  tke {last.loss_tke:.6f}  "
              f"ktp {last.loss_ktp:.6f}")
    return 0


def cmd_eval(args) -> int:
    if args.with_text and not args.text:
        raise CLIError("--with-text requires --text PATH (aligned-text file)")
    ckpt = Checkpoint.load(args.checkpoint)
    if ckpt.vocab is None:
        raise CLIError(f"{args.checkpoint}: checkpoint carries no vocabulary")
    vocab = ckpt.vocab
    tkge, enc = models_from_checkpoint(ckpt)
    try:
        test = index_quadruples(read_quadruple_file(args.data), _frozen(vocab))
    except KeyError as e:
        raise CLIError(f"{args.data}: label {e} not in the checkpoint vocabulary") from None
    known = [test] + [index_quadruples(read_quadruple_file(p), _frozen(vocab))
                      for p in args.filter or []]
    known = np.concatenate(known)

    if args.with_text:
        if enc is None:
            raise CLIError("--with-text needs a jointly trained checkpoint")
        samples = load_aligned(args.text, vocab, ckpt.config.max_len)
        raw = evaluate_with_text(enc, samples, known, "raw")
        filt = evaluate_with_text(enc, samples, known, "filtered")
    else:
        raw, filt = evaluate_both(tkge, test, known)
    report = raw if args.setting == "raw" else filt
    ok = all(f <= r for f, r in zip(filt.ranks, raw.ranks))
    print(report.to_table())
    print(report.to_json())
    print(f"sanity: filtered rank <= raw rank for all {len(raw.ranks)} queries: "
          f"{'OK' if ok else 'VIOLATED'}")
    if not ok:
        print("error: sanity check failed; report not written", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".report.json")
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


class _frozen:
    """Vocabulary view whose id spaces refuse to grow."""

    def __init__(self, vocab):
        self.timestamps = vocab.timestamps
        self.entities = _NoAdd(vocab.entities)
        self.predicates = _NoAdd(vocab.predicates)


class _NoAdd:
    def __init__(self, space):
        self._s = space

    def add(self, label):
        return self._s.id(label)


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ecola", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pair", help="pair quadruples with sentences mentioning both entities")
    p.add_argument("--quads", required=True)
    p.add_argument("--docs", required=True, help="JSON lines with 'key' and 'text'")
    p.add_argument("--out", required=True)
    p.add_argument("--surface-forms", help="JSON object: entity label -> surface form")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("train", help="joint or embedding-only training")
    p.add_argument("--config", required=True)
    p.add_argument("--tke-only", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="link-prediction evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="quadruple file to evaluate")
    p.add_argument("--filter", action="append", help="extra known-fact files (repeatable)")
    p.add_argument("--with-text", action="store_true")
    p.add_argument("--text", help="aligned-text file for --with-text")
    p.add_argument("--setting", choices=("raw", "filtered"), default="filtered")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, DataFormatError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
