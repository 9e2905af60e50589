"""Optimization: MSE losses, Adam, the two-stage and end-to-end training
procedures, per-epoch loss logging, and checkpoint files.

Stage one fits the denoiser alone on (noisy, clean) pairs.  Stage two freezes
it, pushes every sample through it once in inference mode, and fits the
encoder/decoder pair on those cleaned inputs against the clean labels.  The
end-to-end mode instead backpropagates one reconstruction loss through all
three networks.  Epoch shuffling draws from a dedicated stream keyed by
(stage, epoch), so an interrupted run resumed from a checkpoint revisits the
identical batch order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from . import seeds
from .channel import ChannelDataset
from .errors import (ConfigError, DataFormatError, DimensionError,
                     NumericError, StateError)
from .model import Decoder, Denoiser, Encoder, ModelConfig
from .nn import Parameter

STAGE_DENOISER = "denoiser"
STAGE_FEEDBACK = "feedback"
STAGE_END_TO_END = "end-to-end"
_STAGE_IDS = {STAGE_DENOISER: 0, STAGE_FEEDBACK: 1, STAGE_END_TO_END: 2}

INFERENCE_BATCH = 200

_BLAS_LIMITED = False


def _limit_blas_threads() -> None:
    """Pin BLAS to one thread: the small per-bin products here lose more to
    thread synchronization than they gain, and the FFT pool owns the cores."""
    global _BLAS_LIMITED
    if not _BLAS_LIMITED:
        threadpool_limits(limits=1, user_api="blas")
        _BLAS_LIMITED = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int | None = None

    def validate(self, n_train: int) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.batch_size <= n_train:
            raise ConfigError(
                f"batch size {self.batch_size} outside [1, training-set size {n_train}]")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass
class LossLog:
    """Rows of (stage, epoch, train loss, validation loss)."""

    rows: list[tuple[str, int, float, float]] = field(default_factory=list)

    CSV_HEADER = "stage,epoch,train_loss,val_loss"

    def append(self, stage: str, epoch: int, train_loss: float, val_loss: float) -> None:
        self.rows.append((stage, int(epoch), float(train_loss), float(val_loss)))

    def write_csv(self, path, append: bool = False) -> None:
        mode = "a" if append else "w"
        with open(path, mode) as f:
            if not append:
                f.write(self.CSV_HEADER + "\n")
            for stage, epoch, tr, va in self.rows:
                f.write(f"{stage},{epoch},{tr!r},{va!r}\n")

    @staticmethod
    def read_csv(path) -> "LossLog":
        log = LossLog()
        with open(path) as f:
            header = f.readline().strip()
            if header != LossLog.CSV_HEADER:
                raise DataFormatError(f"unexpected loss log header {header!r} in {path}")
            for line in f:
                stage, epoch, tr, va = line.strip().split(",")
                log.append(stage, int(epoch), float(tr), float(va))
        return log


def mse_loss(pred: np.ndarray, label: np.ndarray):
    """Batch-mean squared Euclidean distance and its gradient w.r.t. pred.

    loss = (1/B) * sum_i ||pred_i - label_i||^2, grad = (2/B) (pred - label).
    """
    if pred.shape != label.shape:
        raise DimensionError(f"prediction shape {pred.shape} != label shape {label.shape}")
    if pred.shape[0] < 1:
        raise DimensionError("loss needs at least one sample")
    b = pred.shape[0]
    diff = pred - label
    loss = float((diff.astype(np.float64) ** 2).sum() / b)
    grad = diff * np.asarray(2.0 / b, dtype=diff.dtype)
    return loss, grad


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= (self.lr * (m / c1)) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        out["adam.t"] = np.array([self.t], dtype=np.float32)
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adam.m.{p.name}"] = m.copy()
            out[f"adam.v.{p.name}"] = v.copy()
        return out

    def load_state(self, entries: Mapping[str, np.ndarray]) -> None:
        self.t = int(round(float(np.asarray(entries["adam.t"]).ravel()[0])))
        for i, p in enumerate(self.params):
            for store, key in ((self.m, f"adam.m.{p.name}"), (self.v, f"adam.v.{p.name}")):
                arr = np.asarray(entries[key])
                if arr.shape != p.value.shape:
                    raise ConfigError(f"optimizer state {key!r} has shape {arr.shape}, "
                                      f"expected {p.value.shape}")
                store[i] = arr.astype(p.value.dtype)


class TrainingDiverged(NumericError):
    """Raised when a loss goes non-finite; carries the best result so far."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    stage: str
    log: LossLog
    best_epoch: int
    best_val_loss: float
    best_weights: "OrderedDict[str, np.ndarray]"
    val_nmse_db: list[float]


@dataclass
class EpochSnapshot:
    """Everything needed to resume after this epoch."""

    stage: str
    epoch: int
    train_loss: float
    val_loss: float
    weights: "OrderedDict[str, np.ndarray]"
    adam_state: "OrderedDict[str, np.ndarray]"
    best_epoch: int
    best_val_loss: float
    best_weights: "OrderedDict[str, np.ndarray]"


def _merge_weights(*nets) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for net in nets:
        out.update(net.weights())
    return out


def _forward_batches(fn, inputs: np.ndarray, batch: int = INFERENCE_BATCH) -> np.ndarray:
    chunks = [fn(inputs[i:i + batch]) for i in range(0, inputs.shape[0], batch)]
    return np.concatenate(chunks, axis=0)


def _validate(fn, inputs: np.ndarray, labels: np.ndarray):
    """Inference-mode loss and mean per-sample error ratio over a val set."""
    n = inputs.shape[0]
    total = 0.0
    ratio_sum = 0.0
    for i in range(0, n, INFERENCE_BATCH):
        x, lab = inputs[i:i + INFERENCE_BATCH], labels[i:i + INFERENCE_BATCH]
        out = fn(x)
        loss, _ = mse_loss(out, lab)
        total += loss * x.shape[0]
        diff = (out.astype(np.float64) - lab.astype(np.float64)) ** 2
        sig = (lab.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
        ratio_sum += float((diff.sum(axis=(1, 2, 3)) / sig).sum())
    return total / n, ratio_sum / n


def _ratio_db(ratio: float) -> float:
    return float(10.0 * np.log10(max(ratio, 1e-30)))


class _Loop:
    """Shared epoch loop: shuffling, best tracking, logging, divergence."""

    def __init__(self, stage: str, tcfg: TrainConfig, n_train: int,
                 resume: EpochSnapshot | None, on_epoch):
        tcfg.validate(n_train)
        self.stage = stage
        self.tcfg = tcfg
        self.n_train = n_train
        self.on_epoch = on_epoch
        self.log = LossLog()
        self.val_nmse_db: list[float] = []
        self.start_epoch = 0
        self.best_epoch = 0
        self.best_val = np.inf
        self.best_weights: OrderedDict[str, np.ndarray] | None = None
        if resume is not None:
            if resume.stage != stage:
                raise ConfigError(f"cannot resume stage {stage!r} from a {resume.stage!r} snapshot")
            self.start_epoch = resume.epoch
            self.best_epoch = resume.best_epoch
            self.best_val = resume.best_val_loss
            self.best_weights = resume.best_weights

    def batches(self, epoch: int):
        rng = seeds.stream(self.tcfg.seed, seeds.SHUFFLE, _STAGE_IDS[self.stage], epoch)
        order = rng.permutation(self.n_train)
        for lo in range(0, self.n_train, self.tcfg.batch_size):
            yield order[lo:lo + self.tcfg.batch_size]

    def diverged(self, exc: Exception) -> NumericError:
        """Wrap a numeric failure, attaching the best checkpoint so far if any."""
        if self.best_weights is not None:
            return TrainingDiverged(str(exc), self.result())
        return exc if isinstance(exc, NumericError) else NumericError(str(exc))

    def finish_epoch(self, epoch: int, train_loss: float, val_loss: float,
                     val_ratio: float, weights_fn, adam: Adam) -> bool:
        """Record an epoch; returns True when training should stop early."""
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise self.diverged(NumericError(
                f"{self.stage} training diverged at epoch {epoch} "
                f"(train loss {train_loss}, val loss {val_loss})"))
        self.log.append(self.stage, epoch, train_loss, val_loss)
        self.val_nmse_db.append(_ratio_db(val_ratio))
        if val_loss < self.best_val or self.best_weights is None:
            self.best_val = val_loss
            self.best_epoch = epoch
            self.best_weights = weights_fn()
        if self.on_epoch is not None:
            self.on_epoch(EpochSnapshot(self.stage, epoch, train_loss, val_loss,
                                        weights_fn(), adam.state(),
                                        self.best_epoch, self.best_val, self.best_weights))
        patience = self.tcfg.patience
        return patience is not None and epoch - self.best_epoch >= patience

    def result(self) -> TrainResult:
        if self.best_weights is None:
            raise StateError("no epoch completed; nothing to return")
        return TrainResult(self.stage, self.log, self.best_epoch, self.best_val,
                           self.best_weights, self.val_nmse_db)


def train_denoiser(train_ds: ChannelDataset, val_ds: ChannelDataset, mcfg: ModelConfig,
                   tcfg: TrainConfig, resume: EpochSnapshot | None = None,
                   on_epoch: Callable[[EpochSnapshot], None] | None = None) -> TrainResult:
    """Stage one: fit the denoiser on (noisy, clean) pairs, track best-validation weights."""
    _limit_blas_threads()
    den = Denoiser(mcfg)
    if resume is not None:
        den.load_weights(resume.weights)
    adam = Adam(den.params(), lr=tcfg.learning_rate)
    if resume is not None:
        adam.load_state(resume.adam_state)
    loop = _Loop(STAGE_DENOISER, tcfg, len(train_ds), resume, on_epoch)
    for epoch in range(loop.start_epoch + 1, tcfg.epochs + 1):
        total = 0.0
        for idx in loop.batches(epoch):
            out = den.forward(train_ds.inputs[idx], train=True)
            loss, grad = mse_loss(out, train_ds.labels[idx])
            adam.zero_grad()
            den.backward(grad, need_input_grad=False)
            try:
                adam.step()
            except NumericError as exc:
                raise loop.diverged(exc) from exc
            total += loss * idx.size
        val_loss, val_ratio = _validate(lambda x: den.forward(x, train=False),
                                        val_ds.inputs, val_ds.labels)
        if loop.finish_epoch(epoch, total / len(train_ds), val_loss, val_ratio,
                             den.weights, adam):
            break
    return loop.result()


def denoise_dataset(denoiser_weights: Mapping[str, np.ndarray], mcfg: ModelConfig,
                    inputs: np.ndarray) -> np.ndarray:
    """Inference-mode denoiser output for a stack of inputs."""
    den = Denoiser(mcfg)
    den.load_weights(denoiser_weights)
    return _forward_batches(lambda x: den.forward(x, train=False), inputs)


def train_feedback(train_ds: ChannelDataset, val_ds: ChannelDataset,
                   denoiser_weights: Mapping[str, np.ndarray], mcfg: ModelConfig,
                   tcfg: TrainConfig, resume: EpochSnapshot | None = None,
                   on_epoch: Callable[[EpochSnapshot], None] | None = None) -> TrainResult:
    """Stage two: freeze the denoiser, fit encoder+decoder on its outputs.

    The cleaned inputs are precomputed once (the frozen denoiser is
    deterministic in inference mode), so the epoch loop only touches the
    encoder and decoder.
    """
    if denoiser_weights is None:
        raise StateError("stage-two training requires trained denoiser weights")
    _limit_blas_threads()
    clean_train = denoise_dataset(denoiser_weights, mcfg, train_ds.inputs)
    clean_val = denoise_dataset(denoiser_weights, mcfg, val_ds.inputs)
    enc, dec = Encoder(mcfg), Decoder(mcfg)
    if resume is not None:
        enc.load_weights(resume.weights)
        dec.load_weights(resume.weights)
    adam = Adam(enc.params() + dec.params(), lr=tcfg.learning_rate)
    if resume is not None:
        adam.load_state(resume.adam_state)

    def reconstruct(x, train=False):
        return dec.forward(enc.forward(x, train), train)

    loop = _Loop(STAGE_FEEDBACK, tcfg, len(train_ds), resume, on_epoch)
    for epoch in range(loop.start_epoch + 1, tcfg.epochs + 1):
        total = 0.0
        for idx in loop.batches(epoch):
            out = reconstruct(clean_train[idx], train=True)
            loss, grad = mse_loss(out, train_ds.labels[idx])
            adam.zero_grad()
            enc.backward(dec.backward(grad), need_input_grad=False)
            try:
                adam.step()
            except NumericError as exc:
                raise loop.diverged(exc) from exc
            total += loss * idx.size
        val_loss, val_ratio = _validate(reconstruct, clean_val, val_ds.labels)
        if loop.finish_epoch(epoch, total / len(train_ds), val_loss, val_ratio,
                             lambda: _merge_weights(enc, dec), adam):
            break
    return loop.result()


def train_end_to_end(train_ds: ChannelDataset, val_ds: ChannelDataset, mcfg: ModelConfig,
                     tcfg: TrainConfig,
                     init_denoiser: Mapping[str, np.ndarray] | None = None,
                     resume: EpochSnapshot | None = None,
                     on_epoch: Callable[[EpochSnapshot], None] | None = None) -> TrainResult:
    """Single-loss training through denoiser, encoder and decoder together."""
    _limit_blas_threads()
    den, enc, dec = Denoiser(mcfg), Encoder(mcfg), Decoder(mcfg)
    if init_denoiser is not None:
        den.load_weights(init_denoiser)
    if resume is not None:
        den.load_weights(resume.weights)
        enc.load_weights(resume.weights)
        dec.load_weights(resume.weights)
    adam = Adam(den.params() + enc.params() + dec.params(), lr=tcfg.learning_rate)
    if resume is not None:
        adam.load_state(resume.adam_state)

    def chain(x, train=False):
        return dec.forward(enc.forward(den.forward(x, train), train), train)

    loop = _Loop(STAGE_END_TO_END, tcfg, len(train_ds), resume, on_epoch)
    for epoch in range(loop.start_epoch + 1, tcfg.epochs + 1):
        total = 0.0
        for idx in loop.batches(epoch):
            out = chain(train_ds.inputs[idx], train=True)
            loss, grad = mse_loss(out, train_ds.labels[idx])
            adam.zero_grad()
            den.backward(enc.backward(dec.backward(grad)), need_input_grad=False)
            try:
                adam.step()
            except NumericError as exc:
                raise loop.diverged(exc) from exc
            total += loss * idx.size
        val_loss, val_ratio = _validate(chain, val_ds.inputs, val_ds.labels)
        if loop.finish_epoch(epoch, total / len(train_ds), val_loss, val_ratio,
                             lambda: _merge_weights(den, enc, dec), adam):
            break
    return loop.result()


# ---------------------------------------------------------------------------
# checkpoint files
#
# magic "ACKP", version u16, config block (u32 n_cc, n_t, gamma numerator,
# gamma denominator, codeword length), then named entries until EOF: u16 name
# length, UTF-8 name, u8 rank, u32 extents, float32 little-endian data.
# Optimizer state and epoch counters ride along as ordinary named entries.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ACKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, mcfg: ModelConfig, entries: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<5I", mcfg.n_cc, mcfg.n_t,
                            mcfg.gamma.numerator, mcfg.gamma.denominator, mcfg.codeword_len))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.atleast_1d(np.asarray(arr))
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (config info dict, ordered name->float32 array entries)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r} at offset 0 in {path}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version} in {path}")
        n_cc, n_t, g_num, g_den, m = struct.unpack("<5I", f.read(20))
        info = {"n_cc": n_cc, "n_t": n_t, "gamma_num": g_num, "gamma_den": g_den, "m": m}
        entries: OrderedDict[str, np.ndarray] = OrderedDict()
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise DataFormatError(f"truncated checkpoint entry at offset {f.tell() - len(head)}")
            (name_len,) = struct.unpack("<H", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise DataFormatError(f"truncated checkpoint data for {name!r} "
                                      f"at offset {f.tell() - len(buf)}")
            entries[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return info, entries


def require_checkpoint_config(info: Mapping[str, int], mcfg: ModelConfig) -> None:
    expected = {"n_cc": mcfg.n_cc, "n_t": mcfg.n_t, "gamma_num": mcfg.gamma.numerator,
                "gamma_den": mcfg.gamma.denominator, "m": mcfg.codeword_len}
    mismatched = {k: (info[k], v) for k, v in expected.items() if info[k] != v}
    if mismatched:
        raise ConfigError(f"checkpoint does not match the model config: "
                          + ", ".join(f"{k}: file has {a}, config wants {b}"
                                      for k, (a, b) in mismatched.items()))


def snapshot_entries(snap: EpochSnapshot) -> "OrderedDict[str, np.ndarray]":
    """Flatten an epoch snapshot into checkpoint entries."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    out["meta.stage_id"] = np.array([_STAGE_IDS[snap.stage]], dtype=np.float32)
    out["meta.epoch"] = np.array([snap.epoch], dtype=np.float32)
    out["meta.best_epoch"] = np.array([snap.best_epoch], dtype=np.float32)
    out["meta.best_val"] = np.array([snap.best_val_loss], dtype=np.float32)
    out.update(snap.weights)
    out.update(snap.adam_state)
    for name, arr in snap.best_weights.items():
        out[f"best.{name}"] = arr
    return out


def entries_to_snapshot(entries: Mapping[str, np.ndarray]) -> EpochSnapshot:
    stage_id = int(round(float(entries["meta.stage_id"].ravel()[0])))
    stage = {v: k for k, v in _STAGE_IDS.items()}[stage_id]
    weights: OrderedDict[str, np.ndarray] = OrderedDict()
    adam_state: OrderedDict[str, np.ndarray] = OrderedDict()
    best: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, arr in entries.items():
        if name.startswith("meta."):
            continue
        if name.startswith("adam."):
            adam_state[name] = arr
        elif name.startswith("best."):
            best[name[len("best."):]] = arr
        else:
            weights[name] = arr
    return EpochSnapshot(
        stage=stage,
        epoch=int(round(float(entries["meta.epoch"].ravel()[0]))),
        train_loss=float("nan"),
        val_loss=float("nan"),
        weights=weights,
        adam_state=adam_state,
        best_epoch=int(round(float(entries["meta.best_epoch"].ravel()[0]))),
        best_val_loss=float(entries["meta.best_val"].ravel()[0]),
        best_weights=best,
    )
