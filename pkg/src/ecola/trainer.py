"""Training loops, Adam, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"ECOLACKP" | u32 version | u64 header length | UTF-8 JSON header | payload

The JSON header echoes the config, step/epoch counters, the seed state, the
vocabulary, and a tensor directory (name, dtype, shape, offset, nbytes).
Payloads are raw little-endian arrays in directory order.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import AlignedSample
from .encoder import TextEncoder
from .ktp import BatchPlan, MaskingStrategy, joint_objective, plan_joint_batch, sample_rngs
from .numerics import Tensor
from .tkge import ModelKind, TKGEModel, negative_sample, tke_loss_from_negatives
from .vocab import IdSpace, Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"ECOLACKP"
FORMAT_VERSION = 1
PRECISIONS = {"float32": np.float32, "float64": np.float64}
# execution settings that never change the trajectory; kept out of checkpoints
RUNTIME_KEYS = ("workers",)


@dataclass
class TrainConfig:
    kind: str = "de"
    dim: int = 64
    gamma: float = 0.5
    layers: int = 2
    heads: int = 2
    lam: float = 0.3
    negatives: int = 16
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    masking: str = "e_or_r_plus_w"
    mask_time: bool = False
    warmup: float = 0.05
    weight_decay: float = 0.0
    precision: str = "float32"
    checkpoint_interval: int = 0       # epochs; 0 = final checkpoint only
    max_len: int = 64
    dropout: float = 0.1
    clip_norm: float = 1.0             # 0 disables clipping
    workers: int = 1
    eval_every: int = 0                # epochs; 0 disables early stopping
    patience: int = 10
    init_scale: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ModelKind.parse(self.kind)
        MaskingStrategy.parse(self.masking)
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        for name in ("dim", "layers", "heads", "batch_size", "workers", "max_len", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "negatives", "checkpoint_interval", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup < 1 or not 0 <= self.dropout < 1:
            raise ValueError("warmup and dropout must lie in [0, 1)")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.dim % self.heads:
            raise ValueError("heads must divide dim")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction and optional decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name].astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data -= (lr * upd).astype(p.data.dtype, copy=False)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(s, dtype=grads[k].dtype)
    return total


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


# --------------------------------------------------------------------------
# checkpoints

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    epoch: int
    tensors: dict[str, np.ndarray]
    vocab: Vocabulary | None = None
    n_subwords: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def has_encoder(self) -> bool:
        return any(k.startswith("enc.") for k in self.tensors)

    def save(self, path: str | Path) -> None:
        dtype = np.dtype(self.config.dtype).newbyteorder("<")
        directory, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype=dtype)
            raw = arr.tobytes()
            directory.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "config": {k: v for k, v in self.config.to_dict().items()
                       if k not in RUNTIME_KEYS},
            "step": self.step,
            "epoch": self.epoch,
            "rng": {"seed": self.config.seed, "epoch": self.epoch, "step": self.step},
            "vocab": _vocab_to_dict(self.vocab) if self.vocab is not None else None,
            "n_subwords": self.n_subwords,
            "extra": self.extra,
            "tensors": directory,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
            fh.write(hb)
            for b in blobs:
                fh.write(b)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        fixed = len(MAGIC) + 12
        if len(raw) < fixed:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<IQ", raw[len(MAGIC):fixed])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        if len(raw) < fixed + hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(raw[fixed:fixed + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header ({e})") from None
        payload = memoryview(raw)[fixed + hlen:]
        tensors = {}
        for entry in header["tensors"]:
            end = entry["offset"] + entry["nbytes"]
            if end > len(payload):
                raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']!r}")
            arr = np.frombuffer(payload[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
            tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(
                np.dtype(entry["dtype"]).newbyteorder("="))
        vocab = _vocab_from_dict(header["vocab"]) if header.get("vocab") else None
        return cls(TrainConfig.from_dict(header["config"]), header["step"], header["epoch"],
                   tensors, vocab, header.get("n_subwords"), header.get("extra", {}))


def _vocab_to_dict(v: Vocabulary) -> dict:
    return {"subwords": v.subwords.labels, "entities": v.entities.labels,
            "predicates": v.predicates.labels, "timestamps": v.timestamps.labels,
            "reciprocal": v.reciprocal}


def _vocab_from_dict(d: dict) -> Vocabulary:
    return Vocabulary(IdSpace(d["subwords"]), IdSpace(d["entities"]), IdSpace(d["predicates"]),
                      IdSpace(d["timestamps"]), d.get("reciprocal", False))


# --------------------------------------------------------------------------
# model assembly

def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


def build_models(config: TrainConfig, n_entities: int, n_predicates: int, n_timestamps: int,
                 n_subwords: int | None = None) -> tuple[TKGEModel, TextEncoder | None]:
    tkge = TKGEModel(config.kind, n_entities, n_predicates, n_timestamps, dim=config.dim,
                     gamma=config.gamma, seed=_sub_seed(config.seed, 1), dtype=config.dtype,
                     init_scale=config.init_scale)
    enc = None
    if n_subwords is not None:
        enc = TextEncoder(tkge, n_subwords, max_len=config.max_len, layers=config.layers,
                          heads=config.heads, dropout=config.dropout,
                          seed=_sub_seed(config.seed, 2), dtype=config.dtype)
    return tkge, enc


def models_from_checkpoint(ckpt: Checkpoint, n_entities: int | None = None,
                           n_predicates: int | None = None, n_timestamps: int | None = None
                           ) -> tuple[TKGEModel, TextEncoder | None]:
    """Rebuild models and copy tensors in; shapes are checked against the config."""
    v = ckpt.vocab
    ne = n_entities if n_entities is not None else v.n_entities
    npred = n_predicates if n_predicates is not None else v.n_predicates
    nt = n_timestamps if n_timestamps is not None else v.n_timestamps
    tkge, enc = build_models(ckpt.config, ne, npred, nt,
                             ckpt.n_subwords if ckpt.has_encoder else None)
    params = {**tkge.params, **(enc.params if enc else {})}
    load_tensors(params, ckpt.tensors)
    return tkge, enc


def load_tensors(params: dict[str, Tensor], tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        if name.startswith("adam."):
            continue
        if name not in params:
            raise CheckpointError(f"unknown tensor name {name!r}")
        if params[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects "
                                  f"{params[name].shape} (config mismatch?)")
        params[name].data[...] = arr
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing}")


# --------------------------------------------------------------------------
# training

class StopTraining(Exception):
    """Raised by a validation callback to end training after the current epoch."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LogRow:
    step: int
    loss_total: float
    loss_tke: float
    loss_ktp: float
    lr: float


@dataclass
class TrainResult:
    tkge: TKGEModel
    encoder: TextEncoder | None
    log: list[LogRow]
    checkpoints: list[Path]
    final: Checkpoint
    best_epoch: int | None = None


def write_log(path: str | Path, rows: Iterable[LogRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_total", "loss_tke", "loss_ktp", "lr"])
        for r in rows:
            w.writerow([r.step, repr(r.loss_total), repr(r.loss_tke), repr(r.loss_ktp),
                        repr(r.lr)])


class _Run:
    """Shared loop for joint and tKE-only training."""

    def __init__(self, config: TrainConfig, tkge: TKGEModel, encoder: TextEncoder | None,
                 n_items: int, planner: Callable[[int, Sequence[int]], BatchPlan],
                 vocab: Vocabulary | None, out_dir: str | Path | None,
                 resume: Checkpoint | None, validate: Callable[[], float] | None):
        self.config = config
        self.tkge, self.encoder = tkge, encoder
        self.params = {**tkge.params, **(encoder.params if encoder else {})}
        self.opt = Adam(self.params, weight_decay=config.weight_decay)
        self.n_items = n_items
        self.planner = planner
        self.vocab = vocab
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.validate = validate
        self.steps_per_epoch = math.ceil(n_items / config.batch_size) if n_items else 0
        self.total_steps = self.steps_per_epoch * config.epochs
        self.warmup_steps = math.ceil(config.warmup * self.total_steps)
        self.step = 0
        self.epoch = 0
        self.log: list[LogRow] = []
        self.checkpoints: list[Path] = []
        if resume is not None:
            self._restore(resume)
        self.last_good = self.snapshot()

    def _restore(self, ckpt: Checkpoint) -> None:
        ignore = dict.fromkeys(("epochs",) + RUNTIME_KEYS, 0)
        if ckpt.config.to_dict() | ignore != self.config.to_dict() | ignore:
            raise CheckpointError("resume checkpoint was written with a different config")
        load_tensors(self.params, {k: v for k, v in ckpt.tensors.items()})
        for name in self.params:
            self.opt.m[name][...] = ckpt.tensors.get(f"adam.m.{name}", 0.0)
            self.opt.v[name][...] = ckpt.tensors.get(f"adam.v.{name}", 0.0)
        self.opt.t = ckpt.step
        self.step, self.epoch = ckpt.step, ckpt.epoch
        self.log = [LogRow(**r) for r in ckpt.extra.get("log", [])]

    def snapshot(self) -> Checkpoint:
        tensors = {k: p.data.copy() for k, p in self.params.items()}
        for k in self.params:
            tensors[f"adam.m.{k}"] = self.opt.m[k].copy()
            tensors[f"adam.v.{k}"] = self.opt.v[k].copy()
        extra = {"log": [dataclasses.asdict(r) for r in self.log]}
        return Checkpoint(self.config, self.step, self.epoch, tensors, self.vocab,
                          self.encoder.n_subwords if self.encoder else None, extra)

    def _save(self, ckpt: Checkpoint, name: str) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        ckpt.save(path)
        self.checkpoints.append(path)

    def _epoch_batches(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence((self.config.seed, 0, epoch)))
        order = rng.permutation(self.n_items)
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, self.n_items, bs)]

    def train_step(self, plan: BatchPlan) -> LogRow:
        cfg = self.config
        drop_rng = None
        if self.encoder is not None and cfg.dropout > 0:
            drop_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, self.step)))
        with nx.Tape() as tape:
            terms = joint_objective(self.encoder, plan, cfg.lam, drop_rng) \
                if self.encoder is not None else None
            if terms is None:
                tke = tke_loss_from_negatives(self.tkge, plan.positives, plan.negatives)
                total, ktp = tke, 0.0
            else:
                total, tke, ktp = terms
        loss = total.item()
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {self.step}")
        grads = tape.backward(total, self.params.values())
        grads = {k: grads[p] for k, p in self.params.items()}
        if cfg.clip_norm > 0:
            clip_global_norm(grads, cfg.clip_norm)
        lr = lr_at(self.step, cfg.lr, self.warmup_steps)
        self.opt.step(grads, lr)
        row = LogRow(self.step, loss, tke.item(), float(ktp.item() if isinstance(ktp, Tensor)
                                                         else ktp), lr)
        self.step += 1
        return row

    def run(self) -> TrainResult:
        cfg = self.config
        best, best_epoch, since_best = -1.0, None, 0
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            while self.epoch < cfg.epochs:
                epoch = self.epoch
                batches = self._epoch_batches(epoch)
                plans = (pool.map(lambda b: self.planner(epoch, b), batches) if pool
                         else (self.planner(epoch, b) for b in batches))
                for plan in plans:
                    try:
                        row = self.train_step(plan)
                    except TrainingDiverged:
                        self._save(self.last_good, "last_good.ckpt")
                        raise
                    self.log.append(row)
                self.epoch += 1
                self.last_good = self.snapshot()
                if cfg.checkpoint_interval and self.epoch % cfg.checkpoint_interval == 0:
                    self._save(self.last_good, f"epoch{self.epoch:05d}.ckpt")
                if self.validate is not None and cfg.eval_every and \
                        self.epoch % cfg.eval_every == 0:
                    try:
                        score = self.validate()
                    except StopTraining:
                        logger.info("stopped by callback at epoch %d", self.epoch)
                        break
                    if score > best:
                        best, best_epoch, since_best = score, self.epoch, 0
                    else:
                        since_best += 1
                        if since_best >= cfg.patience:
                            logger.info("early stop at epoch %d (best %d)", self.epoch,
                                        best_epoch)
                            break
        finally:
            if pool:
                pool.shutdown()
        final = self.snapshot()
        self._save(final, "final.ckpt")
        if self.out_dir is not None:
            write_log(self.out_dir / "metrics.csv", self.log)
        return TrainResult(self.tkge, self.encoder, self.log, self.checkpoints, final,
                           best_epoch)


def train_joint(config: TrainConfig, aligned: Sequence[AlignedSample], n_entities: int,
                n_predicates: int, n_timestamps: int, n_subwords: int,
                vocab: Vocabulary | None = None, out_dir: str | Path | None = None,
                resume: Checkpoint | None = None,
                validate: Callable[[TKGEModel], float] | None = None) -> TrainResult:
    """Multi-task training on aligned samples (one epoch = one pass over them)."""
    if not aligned:
        raise ValueError("joint training needs aligned samples")
    tkge, enc = build_models(config, n_entities, n_predicates, n_timestamps, n_subwords)
    aligned = list(aligned)

    def planner(epoch: int, idx: Sequence[int]) -> BatchPlan:
        return plan_joint_batch([aligned[i] for i in idx], enc, config.negatives,
                                config.masking, config.seed, epoch, idx, config.mask_time)

    run = _Run(config, tkge, enc, len(aligned), planner, vocab, out_dir, resume,
               (lambda: validate(tkge)) if validate else None)
    return run.run()


def plan_tke_batch(quads: np.ndarray, M: int, seed: int, epoch: int, idx: Sequence[int],
                   n_entities: int) -> BatchPlan:
    pos = quads[np.asarray(idx)]
    negs = []
    for q, i in zip(pos, idx):
        neg_rng, _ = sample_rngs(seed, epoch, int(i))
        if M:
            negs.append(negative_sample(q, M, neg_rng, n_entities))
    negatives = np.concatenate(negs) if negs else np.zeros((0, 4), dtype=np.int64)
    return BatchPlan(pos, negatives, [])


def train_tke_only(config: TrainConfig, quadruples: np.ndarray, n_entities: int,
                   n_predicates: int, n_timestamps: int, vocab: Vocabulary | None = None,
                   out_dir: str | Path | None = None, resume: Checkpoint | None = None,
                   validate: Callable[[TKGEModel], float] | None = None) -> TrainResult:
    """Embedding-only baseline; no encoder parameters are created."""
    quads = np.asarray(quadruples, dtype=np.int64).reshape(-1, 4)
    tkge, _ = build_models(config, n_entities, n_predicates, n_timestamps)

    def planner(epoch: int, idx: Sequence[int]) -> BatchPlan:
        return plan_tke_batch(quads, config.negatives, config.seed, epoch, idx, n_entities)

    run = _Run(config, tkge, None, len(quads), planner, vocab, out_dir, resume,
               (lambda: validate(tkge)) if validate else None)
    return run.run()
