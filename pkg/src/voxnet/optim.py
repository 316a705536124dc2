"""Adam and Nesterov-momentum updates and the fixed-epoch training loop."""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericalAbort

log = logging.getLogger(__name__)

# Hyperparameters the two architectures were trained with.
PUBLISHED_DEFAULTS = {
    "voxcnn": {"optimizer": "adam", "lr": 27e-6, "batch_size": 5, "epochs": 150},
    "voxresnet": {"optimizer": "nesterov", "lr": 1e-4, "batch_size": 3, "epochs": 70},
}


@dataclass
class TrainConfig:
    arch: str = "voxcnn"
    optimizer: str = "adam"
    lr: float = 27e-6
    batch_size: int = 5
    epochs: int = 150
    dropout_p: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("adam", "nesterov"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"invalid lr/batch_size/epochs: {self.lr}, {self.batch_size}, {self.epochs}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def for_arch(cls, arch, **overrides):
        if arch not in PUBLISHED_DEFAULTS:
            raise ConfigError(f"unknown architecture {arch!r}")
        values = dict(PUBLISHED_DEFAULTS[arch], arch=arch)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    kind: str
    lr: float
    hyper: dict
    slots: dict = field(default_factory=dict)
    timestep: int = 0


def make_optimizer(config):
    if config.optimizer == "adam":
        hyper = {"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps}
    else:
        hyper = {"mu": config.momentum}
    return OptimizerState(config.optimizer, config.lr, hyper)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in parameter {name!r}")


def adam_step(state, params, grads):
    """In-place bias-corrected Adam update of ``params`` (dict of arrays)."""
    _check_finite(grads)
    state.timestep += 1
    t = state.timestep
    b1, b2, eps = state.hyper["beta1"], state.hyper["beta2"], state.hyper["eps"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.slots:
            state.slots[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state.slots[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def nesterov_lookahead(state, params):
    """Shift params to ``theta + mu*v``; returns the saved ``theta`` for :func:`nesterov_step`."""
    saved = {name: p.copy() for name, p in params.items()}
    mu = state.hyper["mu"]
    for name, p in params.items():
        if name in state.slots:
            p += mu * state.slots[name]
    return saved


def nesterov_step(state, params, grads, saved=None):
    """``v <- mu*v - lr*g``; ``theta <- theta + v`` with ``g`` taken at the lookahead point.

    ``saved`` holds the pre-lookahead parameters; when omitted the params are
    assumed to already sit at ``theta``.
    """
    _check_finite(grads)
    state.timestep += 1
    mu = state.hyper["mu"]
    for name, p in params.items():
        if name not in state.slots:
            state.slots[name] = np.zeros_like(p)
        v = state.slots[name]
        v *= mu
        v -= state.lr * grads[name]
        if saved is not None:
            p[...] = saved[name]
        p += v
    return params, state


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    val_acc: float


class EpochLog(list):
    """Per-epoch training curve; serializes to ``epoch,train_loss,val_auc,val_acc`` CSV."""

    header = ("epoch", "train_loss", "val_auc", "val_acc")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for r in self:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc), repr(r.val_acc)])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path):
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_auc"]),
                               float(r["val_acc"])) for r in rows)


def _epoch_seed(seed, epoch):
    return np.random.SeedSequence([int(seed), 0xB47C4, int(epoch)]).generate_state(1)[0]


def _batch(X, idx):
    return np.ascontiguousarray(X[idx][:, None], dtype=np.float32)


def train(net, X, y, config, val=None, callbacks=(), checkpoint=None):
    """Fixed-epoch training over class-balanced mini-batches.

    ``X`` is ``(n, D, H, W)`` and ``y`` holds integer labels. ``val`` is an
    optional ``(X_val, y_val)`` pair scored after every epoch. Each callback
    receives ``(record, net)``; a truthy return stops training early (test
    harness hook, not part of the published protocol). When ``checkpoint`` is a
    path, the last good parameters are written there on a numerical abort.
    """
    from .data import balanced_batch_plan
    from .evaluation import accuracy, roc_auc
    from .network import save

    y = np.asarray(y, dtype=np.int64)
    state = make_optimizer(config)
    params = net.parameters()
    # buffers too: a bad forward corrupts batchnorm running statistics
    tensors = net.state()
    net.reseed(int(np.random.SeedSequence([int(config.seed), 0xD20]).generate_state(1)[0]))
    history = EpochLog()
    for epoch in range(1, config.epochs + 1):
        plan = balanced_batch_plan(y, config.batch_size, _epoch_seed(config.seed, epoch))
        total, count = 0.0, 0
        for idx in plan.batches:
            idx = np.asarray(idx)
            last_good = {k: v.copy() for k, v in tensors.items()} if checkpoint else None
            saved = nesterov_lookahead(state, params) if state.kind == "nesterov" else None
            net.forward(_batch(X, idx), mode="train")
            loss = net.loss(y[idx])
            try:
                if not math.isfinite(loss):
                    raise NumericalAbort(f"non-finite loss at epoch {epoch}")
                grads = net.backward(y[idx])
                if state.kind == "adam":
                    adam_step(state, params, grads)
                else:
                    nesterov_step(state, params, grads, saved)
            except NumericalAbort as exc:
                if checkpoint:
                    for k, v in tensors.items():
                        v[...] = last_good[k]
                    save(net, checkpoint)
                raise NumericalAbort(f"{exc} (epoch {epoch})", checkpoint=checkpoint) from exc
            total += loss * len(idx)
            count += len(idx)
        net.clear_cache()
        auc = acc = float("nan")
        if val is not None:
            probs = net.predict(val[0][:, None])[:, 1]
            yv = np.asarray(val[1])
            acc = accuracy(probs, yv)
            auc = roc_auc(probs, yv) if len(np.unique(yv)) == 2 else float("nan")
        record = EpochRecord(epoch, total / max(count, 1), auc, acc)
        history.append(record)
        log.info("epoch %d loss %.5f val_auc %.4f val_acc %.4f", *asdict(record).values())
        if any([cb(record, net) for cb in callbacks]):
            break
    return net, history
