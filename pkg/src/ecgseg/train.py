"""Adam, the epoch loop with early stopping, cross-validation, random search,
and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import N_CLASSES, SegmentSet, one_hot_encode
from .nn import Model, ModelConfig, ccel_loss, check_params, model_backward, model_forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 3
    min_delta: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"beta1, beta2 must be in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.patience < 1:
            raise ValueError(f"patience must be ≥ 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be ≥ 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(state: AdamState, params, grads, config: TrainConfig) -> None:
    """One in-place Adam update of ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter tensor {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**state.t
    corr2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        params[name] -= (config.alpha * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(
            params[name].dtype
        )


# ------------------------------------------------------------ epoch loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopping_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def to_rows(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.train_loss:.8f},{e.train_acc:.8f},{e.val_loss:.8f},{e.val_acc:.8f}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "stopping_epoch": self.stopping_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }


def _xy(data: SegmentSet | tuple[np.ndarray, np.ndarray], dtype):
    if isinstance(data, SegmentSet):
        return np.asarray(data.samples, dtype=dtype), np.asarray(data.labels, dtype=np.int64)
    x, y = data
    return np.asarray(x, dtype=dtype), np.asarray(y, dtype=np.int64)


def evaluate_loss(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 32):
    """Mean CCEL and sample accuracy at inference (no dropout)."""
    total_loss = 0.0
    correct = 0
    n = 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        probs, _ = model.forward(xb, training=False)
        loss, _ = ccel_loss(probs, one_hot_encode(yb).astype(probs.dtype))
        total_loss += loss * yb.size
        correct += int(np.sum(np.argmax(probs, axis=-1) == yb))
        n += yb.size
    return total_loss / n, correct / n


class EarlyStopping:
    """Stop once ``patience`` epochs pass without the validation loss dropping
    strictly below ``best - min_delta``."""

    def __init__(self, patience: int = 3, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def fit(
    model: Model,
    train_data: SegmentSet | tuple[np.ndarray, np.ndarray],
    val_data: SegmentSet | tuple[np.ndarray, np.ndarray],
    config: TrainConfig = TrainConfig(),
    callback=None,
) -> tuple[Model, TrainReport]:
    """Train with Adam until early stopping; returns the best-validation model."""
    dtype = model.params["dense.w"].dtype
    x_tr, y_tr = _xy(train_data, dtype)
    x_va, y_va = _xy(val_data, dtype)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("fit needs non-empty training and validation sets")

    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(model.params)
    stopper = EarlyStopping(config.patience, config.min_delta)
    report = TrainReport()
    best_params = {k: v.copy() for k, v in model.params.items()}

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        loss_sum = 0.0
        correct = 0
        count = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            probs, cache = model_forward(model.params, xb, model.config, training=True, rng=rng)
            loss, dlogits = ccel_loss(probs, one_hot_encode(yb).astype(dtype))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}: training loss is {loss}")
            grads = model_backward(cache, dlogits)
            adam_step(state, model.params, grads, config)
            loss_sum += loss * yb.size
            correct += int(np.sum(np.argmax(probs, axis=-1) == yb))
            count += yb.size
        val_loss, val_acc = evaluate_loss(model, x_va, y_va)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"epoch {epoch}: validation loss is {val_loss}")
        rec = EpochRecord(epoch, loss_sum / count, correct / count, val_loss, val_acc)
        report.epochs.append(rec)
        log.info(
            "epoch=%d train_loss=%.6f train_acc=%.6f val_loss=%.6f val_acc=%.6f",
            epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc,
        )
        if callback is not None:
            callback(rec)
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = {k: v.copy() for k, v in model.params.items()}
        if stop:
            break

    report.stopping_epoch = report.epochs[-1].epoch
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    model.params = best_params
    return model, report


# --------------------------------------------------------- cross-validation


@dataclass
class CvResult:
    models: list[Model]
    reports: list[TrainReport]
    y_true: np.ndarray  # all validation samples, fold order
    probs: np.ndarray  # matching posteriors [N, 4]
    segment_order: np.ndarray  # segment index for each validation segment


def run_cv(
    segments: SegmentSet,
    folds: Sequence[Sequence[int]],
    config: TrainConfig,
    model_config: ModelConfig = ModelConfig(),
) -> CvResult:
    """Train one model per fold (validated on that fold) and pool the
    held-out predictions of all folds."""
    models, reports, trues, probs, order = [], [], [], [], []
    dtype = np.dtype(config.dtype)
    for k, val_idx in enumerate(folds):
        val_set = set(val_idx)
        train_idx = [i for i in range(len(segments)) if i not in val_set]
        model = Model.create(model_config, seed=config.seed + k, dtype=dtype)
        fold_cfg = replace(config, seed=config.seed + k)
        log.info("fold=%d train_segments=%d val_segments=%d", k, len(train_idx), len(val_idx))
        model, report = fit(model, segments.subset(train_idx), segments.subset(val_idx), fold_cfg)
        val = segments.subset(val_idx)
        p = model.predict_proba(np.asarray(val.samples, dtype=dtype))
        models.append(model)
        reports.append(report)
        trues.append(val.labels.reshape(-1))
        probs.append(p.reshape(-1, N_CLASSES))
        order.extend(val_idx)
    return CvResult(
        models=models,
        reports=reports,
        y_true=np.concatenate(trues).astype(np.int64),
        probs=np.concatenate(probs).astype(np.float64),
        segment_order=np.asarray(order, dtype=np.int64),
    )


# ----------------------------------------------------------- random search


@dataclass(frozen=True)
class SearchSpace:
    alpha: tuple[float, float] = (1e-4, 1e-2)
    beta1: tuple[float, float] = (0.8, 0.99)
    beta2: tuple[float, float] = (0.99, 0.9999)
    epsilon: tuple[float, float] = (1e-9, 1e-6)


def sample_configs(space: SearchSpace, n_trials: int, seed: int, base: TrainConfig) -> list[TrainConfig]:
    """alpha and epsilon log-uniform, betas uniform."""
    if n_trials < 1:
        raise ValueError("n_trials must be ≥ 1")
    for name in ("alpha", "beta1", "beta2", "epsilon"):
        lo, hi = getattr(space, name)
        if not lo <= hi:
            raise ValueError(f"invalid range for {name}: {lo} > {hi}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trials):
        alpha = float(np.exp(rng.uniform(np.log(space.alpha[0]), np.log(space.alpha[1]))))
        b1 = float(rng.uniform(*space.beta1))
        b2 = float(rng.uniform(*space.beta2))
        eps = float(np.exp(rng.uniform(np.log(space.epsilon[0]), np.log(space.epsilon[1]))))
        out.append(replace(base, alpha=alpha, beta1=b1, beta2=b2, epsilon=eps))
    return out


@dataclass
class Trial:
    index: int
    config: TrainConfig
    best_val_loss: float
    stopping_epoch: int
    error: str | None = None


def random_search(
    train_data,
    val_data,
    space: SearchSpace = SearchSpace(),
    n_trials: int = 10,
    seed: int = 0,
    base: TrainConfig = TrainConfig(max_epochs=5),
    model_config: ModelConfig = ModelConfig(),
) -> tuple[TrainConfig, list[Trial]]:
    """Short-budget training per sampled config; best = lowest validation loss."""
    trials = []
    dtype = np.dtype(base.dtype)
    for i, cfg in enumerate(sample_configs(space, n_trials, seed, base)):
        model = Model.create(model_config, seed=base.seed, dtype=dtype)
        try:
            _, report = fit(model, train_data, val_data, cfg)
            trials.append(Trial(i, cfg, report.best_val_loss, report.stopping_epoch))
        except TrainingDiverged as exc:
            trials.append(Trial(i, cfg, math.inf, 0, str(exc)))
        log.info("trial=%d alpha=%.3g val_loss=%.6f", i, cfg.alpha, trials[-1].best_val_loss)
    ok = [t for t in trials if t.error is None and math.isfinite(t.best_val_loss)]
    if not ok:
        log_lines = "; ".join(f"#{t.index}: {t.error}" for t in trials)
        raise TrainingDiverged(f"all {len(trials)} trials diverged: {log_lines}")
    best = min(ok, key=lambda t: (t.best_val_loss, t.index))
    return best.config, trials


# ------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ECGSEGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: Model, manifest: dict | None = None) -> None:
    """Write ``magic | version u32 | manifest length u32 | manifest JSON |
    parameter arrays (little-endian, manifest order) | sha256 of all preceding bytes``."""
    meta = dict(manifest or {})
    meta["format_version"] = CHECKPOINT_VERSION
    meta["architecture"] = model.config.to_dict()
    dtype = model.params["dense.w"].dtype
    meta["dtype"] = np.dtype(dtype).name
    meta["tensors"] = [[k, list(v.shape)] for k, v in model.params.items()]
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    le = np.dtype(dtype).newbyteorder("<")
    for name in model.config.param_shapes():
        buf.write(np.ascontiguousarray(model.params[name], dtype=le).tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    meta = json.loads(body[off : off + hlen])
    off += hlen
    config = ModelConfig.from_dict(meta["architecture"])
    le = np.dtype(meta["dtype"]).newbyteorder("<")
    params = {}
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape)) * le.itemsize
        params[name] = np.frombuffer(body, dtype=le, count=int(np.prod(shape)), offset=off).reshape(
            shape
        ).astype(meta["dtype"])
        off += n
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after parameter data")
    target = expected or config
    try:
        check_params(target, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return Model(target, params), meta
