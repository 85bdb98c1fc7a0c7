"""Classifier training on synthetic-only folds, AUC, and result aggregation.

Training applies the standard regularizer stack: per-sample random affine
augmentation each epoch, inverted dropout before the head, and early
stopping on real-image validation loss with best-weight restoration.
Evaluation reports the Mann-Whitney AUC (ties credited one half).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import seeding
from .augment import AugmentRanges, random_augment
from .autodiff import Tensor
from .errors import StyleforgeError, TrainingError
from .featnet import (
    NetParameters,
    NetworkSpec,
    WeightBundle,
    init_weights,
    predict_probs,
    run_network,
)
from .pipeline import BENIGN, CLASSES, MALIGNANT, DatasetManifest, FoldEntry
from . import images as imageio

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout: float = 0.5
    patience: int = 5
    augment: AugmentRanges | None = field(default_factory=AugmentRanges)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise StyleforgeError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.patience >= self.epochs:
            raise StyleforgeError(
                f"patience ({self.patience}) must be smaller than epochs ({self.epochs})"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise StyleforgeError("epochs and batch_size must be positive")


@dataclass
class ClassifierModel:
    spec: NetworkSpec
    weights: WeightBundle
    arch: str


@dataclass
class Metrics:
    arch: str
    regime: str
    fold: int
    val_auc: float
    val_accuracy: float
    test_auc: float | None
    best_epoch: int
    stopped_epoch: int
    train_losses: list[float]
    val_losses: list[float]
    seed: int

    def to_json(self) -> dict:
        return dict(self.__dict__)

    def save(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {**(extra or {}), **self.to_json()}
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _label_of(record) -> str:
    label = record.label if record.source == "real" else record.pseudo_label
    if label not in CLASSES:
        raise TrainingError(f"record {record.id!r} has no usable label")
    return label


def _class_index(label: str) -> int:
    return 1 if label == MALIGNANT else 0


def train_classifier(
    spec: NetworkSpec,
    fold: FoldEntry,
    manifest: DatasetManifest,
    root: Path | str,
    cfg: TrainConfig,
    training_ids: list[str] | None = None,
    fold_index: int = 0,
    regime: str = "with_da",
) -> tuple[ClassifierModel, Metrics]:
    """Train one classifier on a fold and report validation metrics.

    Training images default to the fold's (synthetic) training set;
    passing ``training_ids`` substitutes another pool (the real baseline
    regime). Validation always runs on the fold's real images. Stops when
    validation loss has not improved for ``cfg.patience`` epochs and
    restores the best-validation weights. Deterministic per config seed.
    """
    by_id = manifest.by_id()
    train_ids = list(training_ids) if training_ids is not None else list(fold.training)
    if not train_ids:
        raise TrainingError("training set is empty")
    val_ids = list(fold.validation)
    root = Path(root)

    train_recs = [by_id[i] for i in train_ids]
    val_recs = [by_id[i] for i in val_ids]
    val_labels = np.asarray([_class_index(_label_of(r)) for r in val_recs], dtype=np.int64)
    if len(set(val_labels.tolist())) < 2:
        raise TrainingError("validation set must contain both classes")
    train_x = np.asarray([imageio.load_png(root / r.path) for r in train_recs])
    train_y = np.asarray([_class_index(_label_of(r)) for r in train_recs], dtype=np.int64)
    val_x = np.asarray([imageio.load_png(root / r.path) for r in val_recs])

    run_seed = seeding.derive_seed(cfg.seed, "train", spec.name, regime, fold_index)
    live = init_weights(spec, run_seed)
    net = NetParameters(spec, live)
    optimizer = ad.Adam(net.flat(), lr=cfg.learning_rate)
    batch_rng = seeding.generator(run_seed, "batches")
    dropout_rng = seeding.generator(run_seed, "dropout")

    def validation_loss() -> float:
        logits, _ = run_network(spec, live, Tensor(val_x))
        return ad.cross_entropy_logits(logits, val_labels).item()

    best_loss = np.inf
    best_epoch = -1
    best_weights = live.copy()
    train_losses: list[float] = []
    val_losses: list[float] = []
    since_improved = 0
    stopped_epoch = cfg.epochs - 1

    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(train_x))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            if cfg.augment is not None:
                batch = np.stack([
                    random_augment(
                        train_x[i],
                        cfg.augment,
                        seeding.derive_seed(run_seed, "aug", epoch, int(i)),
                    )
                    for i in batch_idx
                ])
            else:
                batch = train_x[batch_idx]
            logits, _ = run_network(
                spec, live, Tensor(batch),
                train=True, dropout_rate=cfg.dropout, dropout_rng=dropout_rng,
                params=net.tensors,
            )
            loss = ad.cross_entropy_logits(logits, train_y[batch_idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"training loss diverged at epoch {epoch}")
            epoch_loss += value * len(batch_idx)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        train_losses.append(epoch_loss / len(train_x))

        v_loss = validation_loss()
        if not np.isfinite(v_loss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        val_losses.append(v_loss)
        if v_loss < best_loss:
            best_loss = v_loss
            best_epoch = epoch
            best_weights = live.copy()
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= cfg.patience:
                stopped_epoch = epoch
                break
    else:
        stopped_epoch = cfg.epochs - 1

    model = ClassifierModel(spec=spec, weights=best_weights, arch=spec.name)
    val_scores = predict_scores(model, val_x)
    metrics = Metrics(
        arch=spec.name,
        regime=regime,
        fold=fold_index,
        val_auc=auc(val_scores, val_labels.tolist()),
        val_accuracy=float(((val_scores >= 0.5).astype(int) == val_labels).mean()),
        test_auc=None,
        best_epoch=best_epoch,
        stopped_epoch=stopped_epoch,
        train_losses=train_losses,
        val_losses=val_losses,
        seed=run_seed,
    )
    return model, metrics


def predict_scores(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Malignant-analog probability per image, dropout off.

    Internally always one image at a time, so batched and one-by-one
    calls yield bit-identical scores.
    """
    probs = predict_probs(model.spec, model.weights, images)
    return probs[:, 1]


def evaluate_fold(
    model: ClassifierModel,
    fold: FoldEntry,
    manifest: DatasetManifest,
    root: Path | str,
) -> float:
    """Test-fold AUC of a trained model on real images."""
    by_id = manifest.by_id()
    recs = [by_id[i] for i in fold.test]
    images = np.asarray([imageio.load_png(Path(root) / r.path) for r in recs])
    labels = [_class_index(_label_of(r)) for r in recs]
    return auc(predict_scores(model, images), labels)


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties 0.5.

    Average-rank implementation, O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise StyleforgeError(f"auc: scores {s.shape} and labels {y.shape} must match 1-D")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise StyleforgeError("auc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# aggregation (per-architecture, per-fold AUC table)
# ---------------------------------------------------------------------------

REGIME_LABELS = {
    "without_da": "Without Data Augmentation",
    "with_da": "With Data Augmentation",
}
REGIME_ORDER = ("without_da", "with_da")


@dataclass
class ReportRow:
    architecture: str
    regime: str
    fold_aucs: list[float]
    average: float


@dataclass
class ExperimentReport:
    k: int
    rows: list[ReportRow]
    regime_means: dict[str, float]
    improvement: float | None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "rows": [
                {
                    "architecture": r.architecture,
                    "regime": r.regime,
                    "fold_aucs": r.fold_aucs,
                    "average": r.average,
                }
                for r in self.rows
            ],
            "regime_means": self.regime_means,
            "improvement": self.improvement,
            **self.meta,
        }


def aggregate_results(
    fold_aucs: dict[tuple[str, str], list[float]], meta: dict | None = None
) -> ExperimentReport:
    """Build the per-fold AUC table from {(architecture, regime): folds}.

    Row averages are plain fold means; the overall improvement is the
    mean over architectures of (with minus without) row averages.
    """
    if not fold_aucs:
        raise StyleforgeError("aggregate_results: no fold data")
    lengths = {len(v) for v in fold_aucs.values()}
    if len(lengths) != 1:
        raise StyleforgeError(f"aggregate_results: ragged fold counts {sorted(lengths)}")
    k = lengths.pop()
    if k == 0:
        raise StyleforgeError("aggregate_results: empty fold lists")

    arches: list[str] = []
    for arch, _ in fold_aucs:
        if arch not in arches:
            arches.append(arch)
    regimes = [r for r in REGIME_ORDER if any(key[1] == r for key in fold_aucs)]
    regimes += sorted({key[1] for key in fold_aucs} - set(REGIME_ORDER))

    rows: list[ReportRow] = []
    for regime in regimes:
        for arch in arches:
            if (arch, regime) not in fold_aucs:
                continue
            folds = [float(v) for v in fold_aucs[(arch, regime)]]
            rows.append(ReportRow(arch, regime, folds, sum(folds) / len(folds)))

    regime_means = {
        regime: float(np.mean([r.average for r in rows if r.regime == regime]))
        for regime in regimes
    }
    improvement = None
    if "with_da" in regime_means and "without_da" in regime_means:
        diffs = []
        for arch in arches:
            with_rows = [r for r in rows if r.architecture == arch and r.regime == "with_da"]
            without_rows = [
                r for r in rows if r.architecture == arch and r.regime == "without_da"
            ]
            if with_rows and without_rows:
                diffs.append(with_rows[0].average - without_rows[0].average)
        if diffs:
            improvement = float(np.mean(diffs))
    return ExperimentReport(
        k=k, rows=rows, regime_means=regime_means, improvement=improvement,
        meta=dict(meta or {}),
    )


def render_report_text(report: ExperimentReport) -> str:
    """Aligned text table: regime-grouped rows, fold columns, AVER column."""
    arch_width = max([len("Architecture")] + [len(r.architecture) for r in report.rows])
    regime_width = max([len("Regime")] + [len(REGIME_LABELS.get(r.regime, r.regime))
                                          for r in report.rows])
    header_cells = [f"{f:>6}" for f in range(report.k)] + [f"{'AVER':>6}"]
    lines = [
        "Per-fold test AUC" + (f"  (seed {report.meta['seed']})" if "seed" in report.meta else ""),
        f"{'Regime':<{regime_width}}  {'Architecture':<{arch_width}}  "
        + "  ".join(header_cells),
    ]
    previous_regime = None
    for row in report.rows:
        regime_label = REGIME_LABELS.get(row.regime, row.regime)
        shown = regime_label if row.regime != previous_regime else ""
        previous_regime = row.regime
        cells = [f"{v:6.3f}" for v in row.fold_aucs] + [f"{row.average:6.3f}"]
        lines.append(
            f"{shown:<{regime_width}}  {row.architecture:<{arch_width}}  "
            + "  ".join(cells)
        )
    if report.improvement is not None:
        lines.append("")
        lines.append(
            f"Average improvement (with - without): {report.improvement:+.4f}"
        )
    return "\n".join(lines) + "\n"
