"""Adam optimization with global-norm clipping, early stopping on dev F1,
and bit-exact binary checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import DatasetSplit, TaggedSentence, Vocabulary
from .evaluation import evaluate
from .numerics import NumericError, Parameter, Tape

CHECKPOINT_MAGIC = b"CHEMNER\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    clip_norm: float = 1.0
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.clip_norm,
               self.max_epochs, self.patience, self.epsilon) <= 0:
            raise ValueError("train config values must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")

    def to_payload(self) -> dict:
        return {"learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "clip_norm": self.clip_norm, "max_epochs": self.max_epochs,
                "patience": self.patience, "seed": self.seed, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon}

    @classmethod
    def from_payload(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(m={p.name: np.zeros_like(p.value) for p in params},
                   v={p.name: np.zeros_like(p.value) for p in params})


def clip_gradients(params: Sequence[Parameter], max_norm: float = 1.0) -> float:
    """Scale all trainable gradients so the global L2 norm is <= max_norm.

    Returns the pre-clip global norm.
    """
    sq = 0.0
    grads = [p.gradient for p in params if p.trainable]
    for g in grads:
        sq += float((g * g).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def adam_step(params: Sequence[Parameter], state: AdamState,
              config: TrainConfig) -> None:
    """Standard bias-corrected Adam; frozen rows and non-trainable
    parameters are never updated."""
    state.step += 1
    t = state.step
    b1, b2, eps, lr = config.beta1, config.beta2, config.epsilon, config.learning_rate
    for p in params:
        if not p.trainable:
            continue
        g = p.gradient
        if p.frozen_rows:
            g[list(p.frozen_rows)] = 0.0
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str                       # "ner" or "bilm"
    config: dict
    bilm_config: dict | None
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    vocab: dict
    bilm_vocab: dict | None
    rng_state: dict | None
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def vocab_payload(vocab: Vocabulary) -> dict:
    return {"words": vocab.words, "chars": vocab.chars,
            "pretrained": sorted(vocab.pretrained), "min_count": vocab.min_count}


def vocab_from_payload(payload: dict) -> Vocabulary:
    return Vocabulary(word_to_id={w: i for i, w in enumerate(payload["words"])},
                      char_to_id={c: i for i, c in enumerate(payload["chars"])},
                      pretrained=frozenset(payload["pretrained"]),
                      min_count=payload["min_count"])


def make_checkpoint(model, opt: AdamState | None, rng: np.random.Generator | None,
                    meta: dict | None = None, kind: str = "ner") -> Checkpoint:
    """Snapshot of a model (duck-typed: config, vocab, all_tensors/params)."""
    if kind == "ner":
        named = model.all_tensors()
        config = model.config.to_payload()
        bilm_config = model.bilm.config.to_payload() if model.bilm is not None else None
        vocab = vocab_payload(model.vocab)
        bilm_vocab = (vocab_payload(model.bilm.config.vocab)
                      if model.bilm is not None else None)
    else:
        named = dict(model.params)
        config = model.config.to_payload()
        bilm_config = None
        vocab = vocab_payload(model.config.vocab)
        bilm_vocab = None
    return Checkpoint(
        kind=kind, config=config, bilm_config=bilm_config,
        tensors={name: p.value.copy() for name, p in named.items()},
        trainable={name: p.trainable for name, p in named.items()},
        opt_m={k: a.copy() for k, a in opt.m.items()} if opt else {},
        opt_v={k: a.copy() for k, a in opt.v.items()} if opt else {},
        opt_step=opt.step if opt else 0,
        vocab=vocab, bilm_vocab=bilm_vocab,
        rng_state=json.loads(json.dumps(rng.bit_generator.state)) if rng else None,
        meta=dict(meta or {}))


def _write_tensor(out: io.BufferedWriter, name: str, arr: np.ndarray) -> None:
    name_b = name.encode("utf-8")
    out.write(struct.pack("<I", len(name_b)))
    out.write(name_b)
    out.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        out.write(struct.pack("<Q", d))
    out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Magic, version, length-prefixed JSON metadata, then named tensor
    blocks (name, shape, little-endian float64) in sorted-name order."""
    metadata = {"kind": ckpt.kind, "config": ckpt.config,
                "bilm_config": ckpt.bilm_config, "trainable": ckpt.trainable,
                "opt_step": ckpt.opt_step, "vocab": ckpt.vocab,
                "bilm_vocab": ckpt.bilm_vocab,
                "rng_state": ckpt.rng_state, "meta": ckpt.meta,
                "version": ckpt.version}
    meta_b = json.dumps(metadata, sort_keys=True, ensure_ascii=True,
                        separators=(",", ":")).encode("utf-8")
    blocks: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.tensors):
        blocks.append((f"p/{name}", ckpt.tensors[name]))
    for name in sorted(ckpt.opt_m):
        blocks.append((f"m/{name}", ckpt.opt_m[name]))
    for name in sorted(ckpt.opt_v):
        blocks.append((f"v/{name}", ckpt.opt_v[name]))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<Q", len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            _write_tensor(f, name, arr)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} "
                              f"at offset {f.tell() - len(data)}")
    return data


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta_len = struct.unpack("<Q", _read_exact(f, 8, "metadata length"))[0]
        try:
            metadata = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt metadata: {e}") from None
        count = struct.unpack("<I", _read_exact(f, 4, "tensor count"))[0]
        tensors: dict[str, np.ndarray] = {}
        opt_m: dict[str, np.ndarray] = {}
        opt_v: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(f, 4, "tensor name length"))[0]
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            ndim = struct.unpack("<I", _read_exact(f, 4, f"{name} ndim"))[0]
            shape = tuple(struct.unpack("<Q", _read_exact(f, 8, f"{name} dim"))[0]
                          for _ in range(ndim))
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, 8 * n_items, f"{name} data")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            group, _, bare = name.partition("/")
            {"p": tensors, "m": opt_m, "v": opt_v}[group][bare] = arr
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor blocks")
    return Checkpoint(kind=metadata["kind"], config=metadata["config"],
                      bilm_config=metadata["bilm_config"], tensors=tensors,
                      trainable=metadata["trainable"], opt_m=opt_m, opt_v=opt_v,
                      opt_step=metadata["opt_step"], vocab=metadata["vocab"],
                      bilm_vocab=metadata.get("bilm_vocab"),
                      rng_state=metadata["rng_state"], meta=metadata["meta"],
                      version=metadata["version"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    dev_f1: float


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_epoch: int
    best_f1: float
    stopping_reason: str  # "patience" or "max_epochs"

    def to_payload(self) -> dict:
        return {"epochs": [{"epoch": e.epoch, "train_loss": e.train_loss,
                            "dev_f1": e.dev_f1} for e in self.epochs],
                "best_epoch": self.best_epoch, "best_f1": self.best_f1,
                "stopping_reason": self.stopping_reason}


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    report: TrainReport


def dev_micro_f1(model, dev_sentences: Sequence[TaggedSentence]) -> float:
    preds = [model.predict(s) for s in dev_sentences]
    return evaluate(dev_sentences, preds, model.config.scheme).micro.f1


def train(model, splits: DatasetSplit, config: TrainConfig,
          dev_scorer: Callable | None = None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Seeded shuffling, batches of ``batch_size`` (short final batch kept),
    clip + Adam per batch, dev micro-F1 per epoch, early stopping after
    ``patience`` epochs without strict improvement."""
    train_sents = list(splits.train)
    dev_sents = list(splits.dev)
    if not train_sents or not dev_sents:
        raise ValueError("train and dev splits must be non-empty")
    scorer = dev_scorer or dev_micro_f1

    trainable = model.trainable_parameters()
    opt = AdamState.init(trainable)
    rng = np.random.default_rng(config.seed)
    start_epoch = 1
    best_f1 = -np.inf
    best_epoch = 0
    stall = 0
    if resume is not None:
        for name, p in model.all_tensors().items():
            p.value[...] = resume.tensors[name]
        for p in trainable:
            opt.m[p.name][...] = resume.opt_m[p.name]
            opt.v[p.name][...] = resume.opt_v[p.name]
        opt.step = resume.opt_step
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.meta.get("epoch", 0) + 1
        best_f1 = resume.meta.get("best_f1", -np.inf)
        best_epoch = resume.meta.get("best_epoch", 0)
        stall = resume.meta.get("stall", 0)

    best_ckpt: Checkpoint | None = None
    epochs: list[EpochStats] = []
    stopping_reason = "max_epochs"
    epoch = start_epoch - 1
    for epoch in range(start_epoch, config.max_epochs + 1):
        order = rng.permutation(len(train_sents))
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_sents[i] for i in order[lo:lo + config.batch_size]]
            for p in trainable:
                p.zero_grad()
            masks = model.make_dropout_masks([len(s.tokens) for s in batch], rng)
            tape = Tape()
            out = model.build_loss(tape, batch, masks)
            if not np.isfinite(out.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            nx.backward(tape, out)
            clip_gradients(trainable, config.clip_norm)
            adam_step(trainable, opt, config)
            loss_sum += float(out.data) * len(batch)
        train_loss = loss_sum / len(train_sents)
        f1 = scorer(model, dev_sents)
        epochs.append(EpochStats(epoch=epoch, train_loss=train_loss, dev_f1=f1))
        if f1 > best_f1:
            best_f1, best_epoch, stall = f1, epoch, 0
            best_ckpt = make_checkpoint(model, opt, rng,
                                        meta={"epoch": epoch, "best_f1": best_f1,
                                              "best_epoch": best_epoch, "stall": stall})
        else:
            stall += 1
            if stall >= config.patience:
                stopping_reason = "patience"
                break

    final_ckpt = make_checkpoint(model, opt, rng,
                                 meta={"epoch": epoch, "best_f1": best_f1,
                                       "best_epoch": best_epoch, "stall": stall})
    if best_ckpt is None:  # dev F1 never improved over a resumed best
        best_ckpt = final_ckpt
    report = TrainReport(epochs=epochs, best_epoch=best_epoch,
                         best_f1=float(best_f1), stopping_reason=stopping_reason)
    return TrainResult(best=best_ckpt, final=final_ckpt, report=report)
