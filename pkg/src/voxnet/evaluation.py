"""ROC AUC, accuracy and the repeated stratified cross-validation driver."""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import stratified_folds
from .errors import DataError, NumericalAbort, ShapeError, UndefinedMetricError
from .models import build
from .optim import TrainConfig, train

log = logging.getLogger(__name__)

STD_DDOF = 0


def roc_auc(scores, labels):
    """Normalized Mann-Whitney statistic; ties between classes count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both positive and negative labels")
    # average 1-based ranks over tie groups, kept as exact half-integers
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0
    rank_sum = avg_rank[inverse][labels].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(predictions, labels, threshold=0.5):
    """Fraction of samples whose thresholded positive-class probability matches the label."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean((predictions > threshold) == labels.astype(bool)))


@dataclass
class MetricsSummary:
    task: tuple
    auc_mean: float
    auc_std: float
    acc_mean: float
    acc_std: float
    n_runs: int = 0
    std_ddof: int = STD_DDOF

    @classmethod
    def from_runs(cls, task, aucs, accs):
        aucs = np.asarray(aucs, dtype=np.float64)
        accs = np.asarray(accs, dtype=np.float64)
        return cls(tuple(task), float(aucs.mean()), float(aucs.std(ddof=STD_DDOF)),
                   float(accs.mean()), float(accs.std(ddof=STD_DDOF)), len(aucs))


@dataclass
class FoldRun:
    repeat: int
    fold: int
    seed: int
    auc: float
    acc: float
    log: list = field(repr=False, default_factory=list)


@dataclass
class CVResult:
    summary: MetricsSummary
    runs: list

    def fold_records(self):
        return [{"repeat": r.repeat, "fold": r.fold, "seed": r.seed, "auc": r.auc, "acc": r.acc}
                for r in self.runs]


def fold_seed(master_seed, repeat, fold):
    return int(np.random.SeedSequence([int(master_seed), 0xCF, repeat, fold]).generate_state(1)[0])


def cross_validate(dataset, task, config, folds=None, n_folds=5, repeats=5, progress=None):
    """Train a fresh network per repeat/fold and aggregate validation AUC and accuracy.

    ``folds`` must index the task-filtered sample list; when omitted a
    stratified split is drawn from ``config.seed``. Per-epoch validation
    curves are kept on every :class:`FoldRun`.
    """
    X, y, subjects = dataset.task_arrays(task)
    if folds is None:
        folds = stratified_folds(y, n_folds, repeats, seed=config.seed)
    if folds.assignments.shape[1] != len(y):
        raise DataError("fold assignment does not match the task-filtered dataset")
    subjects = np.asarray(subjects)
    runs = []
    for r, f, tr, va in folds:
        if set(subjects[tr]) & set(subjects[va]):
            raise DataError(f"subject leakage between train and validation (repeat {r}, fold {f})")
        seed = fold_seed(config.seed, r, f)
        cfg = TrainConfig(**dict(asdict(config), seed=seed))
        net = build(config.arch, 2, X.shape[1], seed=seed, dropout_p=config.dropout_p)
        try:
            net, history = train(net, X[tr], y[tr], cfg, val=(X[va], y[va]))
        except NumericalAbort as exc:
            raise NumericalAbort(f"repeat {r}, fold {f}: {exc}", exc.checkpoint) from exc
        probs = net.predict(X[va][:, None])[:, 1]
        run = FoldRun(r, f, seed, roc_auc(probs, y[va]), accuracy(probs, y[va]), history)
        log.info("task %s repeat %d fold %d auc %.4f acc %.4f", task, r, f, run.auc, run.acc)
        runs.append(run)
        if progress is not None:
            progress(run)
    runs.sort(key=lambda run: (run.repeat, run.fold))
    summary = MetricsSummary.from_runs(task, [r.auc for r in runs], [r.acc for r in runs])
    return CVResult(summary, runs)


def format_mean_std(mean, std):
    """Two-decimal ``.88 ± .08`` style, leading zero dropped."""
    def short(v):
        s = f"{v:.2f}"
        return s[1:] if s.startswith("0.") else s
    return f"{short(mean)} ± {short(std)}"


def task_name(task):
    return f"{task[0]} vs {task[1]}"


@dataclass
class Report:
    text: str
    csv: str


def tabulate(summaries):
    """Render summaries as an aligned text table and as CSV."""
    header = f"{'task':<14} {'AUC':<12} {'Acc.':<12}"
    lines = [header, "-" * len(header)]
    rows = ["task,auc_mean,auc_std,acc_mean,acc_std"]
    for s in summaries:
        name = task_name(s.task)
        lines.append(f"{name:<14} {format_mean_std(s.auc_mean, s.auc_std):<12} "
                     f"{format_mean_std(s.acc_mean, s.acc_std):<12}")
        rows.append(f"{name},{s.auc_mean!r},{s.auc_std!r},{s.acc_mean!r},{s.acc_std!r}")
    return Report("\n".join(lines) + "\n", "\n".join(rows) + "\n")
