"""Mini-batch Adam training and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, TrainingExample, dataset_examples
from .evaluation import evaluate_params
from .graph import build_graph
from .model import VariantConfig, batch_loss, collate_examples, init_params
from .numerics import AdamState, ModelParams, Tape, adam_step

log = logging.getLogger(__name__)

MAGIC_PREFIX = b"PEN4REC"
FORMAT_VERSION = 1


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, batch_index: int, diagnostics: dict[str, str]):
        self.epoch, self.batch_index, self.diagnostics = epoch, batch_index, diagnostics
        detail = "; ".join(f"{k}: {v}" for k, v in diagnostics.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index} ({detail})")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: VariantConfig = field(default_factory=VariantConfig)
    epochs: int = 30
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 3
    l2: float = 1e-6
    seed: int = 0
    patience: int = 5
    cutoff: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_decay_every < 1 or self.lr_decay <= 0:
            raise ValueError("lr_decay must be > 0 and lr_decay_every >= 1")
        if self.l2 < 0 or self.patience < 0:
            raise ValueError("l2 and patience must be >= 0")

    @property
    def dropout(self) -> float:
        return self.model.dropout

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def flat(self) -> dict[str, object]:
        out = {f"model.{k}": v for k, v in asdict(self.model).items()}
        out |= {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "TrainConfig":
        def conv(template, raw: str):
            if isinstance(template, bool):
                return raw == "True"
            return type(template)(raw)

        mdefaults, tdefaults = VariantConfig(), cls()
        mkw = {k[6:]: conv(getattr(mdefaults, k[6:]), v) for k, v in flat.items() if k.startswith("model.")}
        tkw = {k: conv(getattr(tdefaults, k), v) for k, v in flat.items() if not k.startswith("model.")}
        return cls(model=VariantConfig(**mkw), **tkw)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    valid_p20: float
    valid_mrr20: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: list[str]
    params: ModelParams
    version: int = FORMAT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list[EpochLog]
    best_epoch: int


def _diagnostics(params: ModelParams, tape: Tape | None = None) -> dict[str, str]:
    out = {}
    for p in params:
        if not np.isfinite(p.data).all():
            out[p.name] = "non-finite values"
        elif tape is not None:
            g = tape.grad(p)
            if not np.isfinite(g).all():
                out[p.name] = "non-finite gradient"
    if not out:
        norms = {p.name: float(np.abs(p.data).max()) for p in params}
        worst = max(norms, key=norms.get)
        out[worst] = f"max |value| {norms[worst]:.3g}"
    return out


def train(
    train_ds: Dataset,
    valid_ds: Dataset | None,
    config: TrainConfig,
    on_epoch: Callable[[EpochLog], None] | None = None,
    stop_when: Callable[[ModelParams, EpochLog], bool] | None = None,
) -> TrainResult:
    """Train a model and keep the parameters with the best validation MRR.

    Random streams are spawned from ``SeedSequence(config.seed)`` in the
    order (initialisation, shuffling, dropout); numpy's PCG64 generator backs
    each stream. ``valid_ds`` defaults to the training data. ``stop_when`` is
    checked after every epoch and ends training early when it returns True.
    """
    examples = dataset_examples(train_ds)
    if not examples:
        raise ValueError("training set has no examples")
    valid_ds = valid_ds if valid_ds is not None and len(valid_ds) else train_ds
    mcfg = config.model
    V = train_ds.n_items
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(V, mcfg, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    graphs = [build_graph(e.input, mcfg.hop_count) for e in examples]
    state = AdamState()

    logs: list[EpochLog] = []
    best_mrr, best_epoch, best_state, stale = -1.0, -1, params.state(), 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(len(examples))
        losses = []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch = collate_examples([examples[i] for i in idx], mcfg, graphs=[graphs[i] for i in idx])
            with Tape() as tape:
                loss, _ = batch_loss(batch, params, mcfg, l2=config.l2, train=True, rng=drop_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, bi, _diagnostics(params))
            tape.backward(loss)
            params.zero_grad()
            params.accumulate(tape)
            adam_step(params, state, lr, config.beta1, config.beta2, config.adam_eps)
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingDiverged(epoch, bi, _diagnostics(params, tape))
            losses.append(value)
        report = evaluate_params(params, mcfg, valid_ds, config.cutoff).report
        rec = EpochLog(epoch + 1, float(np.mean(losses)), report.p_at_k, report.mrr_at_k, lr)
        logs.append(rec)
        log.info("%s", rec.to_json())
        if on_epoch:
            on_epoch(rec)
        if report.mrr_at_k > best_mrr:
            best_mrr, best_epoch, best_state, stale = report.mrr_at_k, epoch + 1, params.state(), 0
        else:
            stale += 1
        if stop_when is not None and stop_when(params, rec):
            best_state, best_epoch = params.state(), epoch + 1
            break
        if config.patience and stale >= config.patience:
            break
    params.load_state(best_state)
    return TrainResult(Checkpoint(config, train_ds.items, params), logs, best_epoch)


def train_examples_count(ds: Dataset) -> int:
    return sum(len(s) - 1 for s in ds.sessions)


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic        8 bytes  b"PEN4REC" + ASCII version digit
#   meta_len     u64
#   meta         meta_len bytes of UTF-8 "key=value" lines
#   n_params     u32
#   per parameter:
#     name_len u32, name bytes, rank u32, rank * u64 dims,
#     prod(dims) * f64 values, row-major
#   all integers and floats little-endian
# ---------------------------------------------------------------------------


def _metadata(config: TrainConfig, vocab: list[str]) -> bytes:
    lines = [f"format_version={FORMAT_VERSION}"]
    lines += [f"config.{k}={v!r}" if isinstance(v, float) else f"config.{k}={v}" for k, v in config.flat().items()]
    lines.append(f"vocab.size={len(vocab)}")
    for i, item in enumerate(vocab):
        if "\n" in item or "\r" in item:
            raise CheckpointError(f"item id {item!r} contains a line break")
        lines.append(f"vocab.{i}={item}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def checkpoint_bytes(params: ModelParams, config: TrainConfig, vocab: list[str]) -> bytes:
    meta = _metadata(config, vocab)
    parts = [MAGIC_PREFIX + str(FORMAT_VERSION).encode(), struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack(f"<I{p.data.ndim}Q", p.data.ndim, *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, config: TrainConfig, vocab: list[str], path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(params, config, vocab))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(8, "magic")
    if not magic.startswith(MAGIC_PREFIX):
        raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
    if magic[7:] != str(FORMAT_VERSION).encode():
        raise CheckpointVersionError(f"unsupported checkpoint version {magic[7:]!r}; expected {FORMAT_VERSION}")
    (meta_len,) = r.unpack("<Q", "metadata length")
    meta = r.take(meta_len, "metadata").decode("utf-8")
    kv = {}
    for line in meta.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointCorruptError(f"malformed metadata line {line!r}")
        kv[key] = value
    config = TrainConfig.from_flat({k[7:]: v for k, v in kv.items() if k.startswith("config.")})
    vocab = [kv[f"vocab.{i}"] for i in range(int(kv["vocab.size"]))]
    (n_params,) = r.unpack("<I", "parameter count")
    params = ModelParams()
    for i in range(n_params):
        (name_len,) = r.unpack("<I", f"name length of parameter {i}")
        name = r.take(name_len, f"name of parameter {i}").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").astype(np.float64)
        params.add(name, values.reshape(dims))
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(config, vocab, params, int(kv.get("format_version", FORMAT_VERSION)))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def expected_checkpoint_size(params: ModelParams, config: TrainConfig, vocab: list[str]) -> int:
    """Byte size implied by the layout, without serialising values."""
    header = 8 + 8 + len(_metadata(config, vocab)) + 4
    return header + sum(4 + len(p.name.encode()) + 4 + 8 * p.data.ndim + 8 * p.data.size for p in params)


def examples_of(ds: Dataset) -> list[TrainingExample]:
    return dataset_examples(ds)
