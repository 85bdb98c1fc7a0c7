"""Dataset pipeline: corpus generation, synthesis batches, labels, folds.

The manifest is the single source of truth for every image. Real records
carry a class label; synthetic records carry provenance (which content
and style images produced them, and with what seed) plus a pseudo-label
once scoring has run. Fold plans train on synthetic images only and keep
any image that sourced a fold's training data out of that fold's
leakage scope.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import images as imageio
from . import seeding
from .errors import (
    BalanceError,
    FoldError,
    ManifestError,
    StyleforgeError,
    SynthesisBatchError,
    SynthesisError,
)
from .featnet import NetworkSpec, WeightBundle, predict_probs
from .nst import StyleTransferConfig, synthesize

log = logging.getLogger(__name__)

BENIGN = "benign-analog"
MALIGNANT = "malignant-analog"
CLASSES = (BENIGN, MALIGNANT)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    path: str
    source: str  # "real" | "synthetic"
    label: str | None = None
    pseudo_label: str | None = None
    score: float | None = None
    provenance: dict | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "path": self.path, "source": self.source}
        if self.label is not None:
            out["label"] = self.label
        if self.pseudo_label is not None:
            out["pseudo_label"] = self.pseudo_label
        if self.score is not None:
            out["score"] = self.score
        if self.provenance is not None:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRecord":
        return cls(
            id=obj["id"],
            path=obj["path"],
            source=obj["source"],
            label=obj.get("label"),
            pseudo_label=obj.get("pseudo_label"),
            score=obj.get("score"),
            provenance=obj.get("provenance"),
        )


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def real(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.source == "real"]

    def synthetic(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.source == "synthetic"]

    def by_id(self) -> dict[str, ManifestRecord]:
        return {r.id: r for r in self.records}

    def extend(self, records) -> None:
        self.records.extend(records)

    def validate(self) -> None:
        """Structural audit: unique ids, label/provenance placement, refs."""
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate manifest id {rec.id!r}")
            seen.add(rec.id)
        real_ids = {r.id for r in self.real()}
        for rec in self.records:
            if rec.source == "real":
                if rec.label not in CLASSES:
                    raise ManifestError(f"real record {rec.id!r} has bad label {rec.label!r}")
                if rec.provenance is not None:
                    raise ManifestError(f"real record {rec.id!r} must not carry provenance")
            elif rec.source == "synthetic":
                if rec.provenance is None:
                    raise ManifestError(f"synthetic record {rec.id!r} lacks provenance")
                for key in ("content_id", "style_id"):
                    ref = rec.provenance.get(key)
                    if ref not in real_ids:
                        raise ManifestError(
                            f"synthetic record {rec.id!r} references unknown real "
                            f"image {ref!r} as {key}"
                        )
                if rec.label is not None:
                    raise ManifestError(
                        f"synthetic record {rec.id!r} must use pseudo_label, not label"
                    )
            else:
                raise ManifestError(f"record {rec.id!r} has bad source {rec.source!r}")

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"kind": "meta", **self.meta}, sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, *paths) -> "DatasetManifest":
        manifest = cls()
        for path in paths:
            for line in Path(path).read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                obj = json.loads(line)
                if obj.get("kind") == "meta":
                    obj.pop("kind")
                    manifest.meta.update(obj)
                else:
                    manifest.records.append(ManifestRecord.from_json(obj))
        return manifest


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


def _coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return yy / max(h - 1, 1), xx / max(w - 1, 1)


def _base_tone(rng, h, w):
    tone = np.array([0.84, 0.69, 0.58]) + rng.uniform(-0.05, 0.05, size=3)
    yy, xx = _coords(h, w)
    slope = rng.uniform(-0.08, 0.08, size=2)
    shade = slope[0] * (yy - 0.5) + slope[1] * (xx - 0.5)
    return tone[None, None, :] + shade[:, :, None]


def _benign_image(rng, h: int, w: int) -> np.ndarray:
    """Smooth low-frequency radial blobs on a skin-tone background."""
    img = _base_tone(rng, h, w)
    yy, xx = _coords(h, w)
    blob = np.zeros((h, w))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        sigma = rng.uniform(0.14, 0.26)
        amp = rng.uniform(0.5, 0.9)
        blob += amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
    blob = np.clip(blob, 0.0, 1.0)
    lesion = np.array([0.52, 0.34, 0.27]) + rng.uniform(-0.04, 0.04, size=3)
    img = img * (1 - blob[:, :, None]) + lesion[None, None, :] * blob[:, :, None]
    return np.clip(img, 0.0, 1.0)


def _malignant_image(rng, h: int, w: int) -> np.ndarray:
    """High-frequency oriented stripes and speckle inside an irregular border."""
    img = _base_tone(rng, h, w)
    yy, xx = _coords(h, w)
    cy, cx = rng.uniform(0.4, 0.6, size=2)
    angles = np.arctan2(yy - cy, xx - cx)
    radius = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    r0 = rng.uniform(0.28, 0.38)
    wobble = np.zeros_like(angles)
    for k in range(2, 6):
        wobble += rng.uniform(0.03, 0.09) * np.sin(k * angles + rng.uniform(0, 2 * np.pi))
    border = r0 * (1.0 + wobble)
    mask = 1.0 / (1.0 + np.exp((radius - border) / 0.015))

    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(5.0, 9.0)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    speckle = rng.normal(0.0, 0.55, size=(h, w))
    texture = 0.5 + 0.32 * stripes + 0.18 * speckle

    dark = np.array([0.38, 0.22, 0.18]) + rng.uniform(-0.04, 0.04, size=3)
    light = np.array([0.72, 0.5, 0.4])
    lesion = dark[None, None, :] + (light - dark)[None, None, :] * texture[:, :, None]
    img = img * (1 - mask[:, :, None]) + lesion * mask[:, :, None]
    return np.clip(img, 0.0, 1.0)


def gen_corpus(
    root: Path | str,
    n_per_class: int,
    size: tuple[int, int] = (32, 32),
    seed: int = 0,
    meta: dict | None = None,
) -> DatasetManifest:
    """Write a two-class PNG corpus under ``root/images`` plus its manifest.

    Class "benign-analog" images are smooth blobs; "malignant-analog"
    images are stripe/speckle textures with irregular borders. Byte
    deterministic per seed.
    """
    if n_per_class < 1:
        raise StyleforgeError(f"n_per_class must be >= 1, got {n_per_class}")
    h, w = size
    if h < 16 or w < 16:
        raise StyleforgeError(f"corpus images must be at least 16x16, got {size}")
    root = Path(root)
    manifest = DatasetManifest(meta=dict(meta or {}))
    text = {k: str(v) for k, v in manifest.meta.items()}
    for label, maker, tag in ((BENIGN, _benign_image, "benign"),
                              (MALIGNANT, _malignant_image, "malignant")):
        for i in range(n_per_class):
            rng = seeding.generator(seed, "corpus", label, i)
            image = maker(rng, h, w)
            rel = f"images/real-{tag}-{i:04d}.png"
            imageio.save_png(root / rel, image, text=text)
            manifest.records.append(
                ManifestRecord(id=f"real-{tag}-{i:04d}", path=rel, source="real", label=label)
            )
    return manifest


def load_corpus_arrays(
    manifest: DatasetManifest, root: Path | str, records=None
) -> tuple[np.ndarray, list[str]]:
    """Load images for the given records (default: all) as one array."""
    recs = list(records) if records is not None else list(manifest.records)
    root = Path(root)
    arrays = [imageio.load_png(root / r.path) for r in recs]
    return np.asarray(arrays), [r.id for r in recs]


def high_frequency_energy(image: np.ndarray) -> float:
    """Mean absolute 4-neighbor Laplacian of the gray image (texture proxy)."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    lap = (
        4 * gray[1:-1, 1:-1]
        - gray[:-2, 1:-1]
        - gray[2:, 1:-1]
        - gray[1:-1, :-2]
        - gray[1:-1, 2:]
    )
    return float(np.abs(lap).mean())


# ---------------------------------------------------------------------------
# pair planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairEntry:
    content_id: str
    style_id: str
    seed: int


@dataclass
class PairPlan:
    entries: list[PairEntry]


def plan_pairs(manifest: DatasetManifest, budget: int, seed: int) -> PairPlan:
    """Choose ``budget`` unique (benign content, malignant style) pairs.

    Every content image is used once per round (shuffled order) before
    any repeats, so coverage grows evenly; per-pair seeds are stable
    hashes of (seed, content, style).
    """
    benign = sorted(r.id for r in manifest.real() if r.label == BENIGN)
    malignant = sorted(r.id for r in manifest.real() if r.label == MALIGNANT)
    if not benign or not malignant:
        raise StyleforgeError("pair planning needs at least one real image per class")
    maximum = len(benign) * len(malignant)
    if budget > maximum:
        raise StyleforgeError(
            f"budget {budget} exceeds the {maximum} distinct content x style pairs"
        )
    rng = seeding.generator(seed, "pair-plan")
    used: dict[str, set[str]] = {c: set() for c in benign}
    entries: list[PairEntry] = []
    while len(entries) < budget:
        order = rng.permutation(len(benign))
        for idx in order:
            if len(entries) >= budget:
                break
            content = benign[idx]
            remaining = [s for s in malignant if s not in used[content]]
            if not remaining:
                continue
            style = remaining[rng.integers(len(remaining))]
            used[content].add(style)
            entries.append(
                PairEntry(content, style, seeding.derive_seed(seed, content, style))
            )
    return PairPlan(entries)


# ---------------------------------------------------------------------------
# batch synthesis
# ---------------------------------------------------------------------------

_WORKER_CTX: dict = {}


def _batch_worker_init(spec, bundle, cfg, images_by_id):
    _WORKER_CTX["spec"] = spec
    _WORKER_CTX["bundle"] = bundle
    _WORKER_CTX["cfg"] = cfg
    _WORKER_CTX["images"] = images_by_id


def _batch_worker(job):
    index, entry = job
    spec, bundle, cfg = _WORKER_CTX["spec"], _WORKER_CTX["bundle"], _WORKER_CTX["cfg"]
    imgs = _WORKER_CTX["images"]
    try:
        result = synthesize(
            imgs[entry.content_id], imgs[entry.style_id], spec, bundle, cfg,
            seed=entry.seed, content_id=entry.content_id, style_id=entry.style_id,
        )
        return index, result.image, None
    except SynthesisError as exc:
        return index, None, f"{entry.content_id}x{entry.style_id}: {exc}"


@dataclass
class BatchResult:
    records: list[ManifestRecord]
    failures: list[str]


def run_synthesis_batch(
    plan: PairPlan,
    manifest: DatasetManifest,
    root: Path | str,
    spec: NetworkSpec,
    bundle: WeightBundle,
    cfg: StyleTransferConfig,
    parallelism: int = 1,
    png_text: dict[str, str] | None = None,
) -> BatchResult:
    """Synthesize one image per plan entry and write PNGs plus records.

    Output ids, files, and record order depend only on the plan, never on
    the degree of parallelism. A failed entry (non-finite loss) is
    recorded and skipped; more than 10% failures aborts the batch.
    """
    root = Path(root)
    by_id = manifest.by_id()
    for entry in plan.entries:
        for ref in (entry.content_id, entry.style_id):
            if ref not in by_id:
                raise ManifestError(f"plan references unknown image {ref!r}")
    images_by_id = {}
    for entry in plan.entries:
        for ref in (entry.content_id, entry.style_id):
            if ref not in images_by_id:
                images_by_id[ref] = imageio.load_png(root / by_id[ref].path)

    jobs = list(enumerate(plan.entries))
    if parallelism <= 1 or len(jobs) <= 1:
        _batch_worker_init(spec, bundle, cfg, images_by_id)
        outcomes = [_batch_worker(job) for job in jobs]
        _WORKER_CTX.clear()
    else:
        ctx = multiprocessing.get_context("fork")
        chunk = max(1, len(jobs) // (parallelism * 4))
        with ctx.Pool(
            parallelism,
            initializer=_batch_worker_init,
            initargs=(spec, bundle, cfg, images_by_id),
        ) as pool:
            outcomes = pool.map(_batch_worker, jobs, chunksize=chunk)

    outcomes.sort(key=lambda item: item[0])
    records: list[ManifestRecord] = []
    failures: list[str] = []
    for index, image, error in outcomes:
        entry = plan.entries[index]
        if error is not None:
            failures.append(error)
            log.warning("synthesis failed for entry %d: %s", index, error)
            continue
        syn_id = f"syn-{index:06d}"
        rel = f"synth/{syn_id}.png"
        imageio.save_png(root / rel, image, text=png_text or {})
        records.append(
            ManifestRecord(
                id=syn_id,
                path=rel,
                source="synthetic",
                provenance={
                    "content_id": entry.content_id,
                    "style_id": entry.style_id,
                    "seed": entry.seed,
                },
            )
        )
    if plan.entries and len(failures) > 0.1 * len(plan.entries):
        raise SynthesisBatchError(
            f"{len(failures)}/{len(plan.entries)} synthesis entries failed: "
            + "; ".join(failures[:5])
        )
    return BatchResult(records=records, failures=failures)


# ---------------------------------------------------------------------------
# pseudo-labeling
# ---------------------------------------------------------------------------


@dataclass
class PseudoLabelReport:
    threshold: float | None
    counts: dict[str, int]
    scores: dict[str, float]
    fallback: bool = False


def pseudo_label_scores(
    model, records, root: Path | str
) -> tuple[dict[str, float], dict[str, str]]:
    """Score each record's image with the classifier (P of malignant-analog).

    ``model`` needs ``spec`` and ``weights`` attributes. Unreadable images
    are reported per id and skipped, not fatal.
    """
    root = Path(root)
    scores: dict[str, float] = {}
    errors: dict[str, str] = {}
    for rec in records:
        try:
            image = imageio.load_png(root / rec.path)
        except OSError as exc:
            errors[rec.id] = str(exc)
            log.warning("unreadable image %s: %s", rec.id, exc)
            continue
        probs = predict_probs(model.spec, model.weights, image)
        scores[rec.id] = float(probs[0, 1])
    return scores, errors


def balance_threshold(scores) -> tuple[float, PseudoLabelReport]:
    """Threshold splitting the scores into counts that differ by at most 1.

    Prefers the midpoint of the two scores straddling the median; sweeps
    all candidate cuts when ties make that midpoint unbalanced. Raises
    BalanceError when no cut can balance (e.g. all scores identical).
    """
    values = [float(s) for s in scores]
    if len(values) < 2:
        raise StyleforgeError(f"balancing needs >= 2 scores, got {len(values)}")
    ordered = sorted(values)
    n = len(ordered)

    def counts_at(t: float) -> tuple[int, int]:
        above = sum(1 for v in values if v >= t)
        return above, n - above

    candidate = (ordered[(n - 1) // 2] + ordered[n // 2]) / 2.0
    best_t, best_counts = candidate, counts_at(candidate)
    if abs(best_counts[0] - best_counts[1]) > 1:
        midpoints = [
            (a + b) / 2.0 for a, b in zip(ordered, ordered[1:]) if a < b
        ]
        for t in [ordered[0] - 1.0, *midpoints, ordered[-1] + 1.0]:
            c = counts_at(t)
            if abs(c[0] - c[1]) < abs(best_counts[0] - best_counts[1]):
                best_t, best_counts = t, c
        if abs(best_counts[0] - best_counts[1]) > 1:
            raise BalanceError(
                f"no threshold balances these scores (best counts {best_counts}); "
                "scores may be all identical",
                best_counts=best_counts,
            )
    report = PseudoLabelReport(
        threshold=best_t,
        counts={MALIGNANT: best_counts[0], BENIGN: best_counts[1]},
        scores={},
    )
    return best_t, report


def assign_pseudo_labels(
    manifest: DatasetManifest, scores: dict[str, float]
) -> PseudoLabelReport:
    """Balance-threshold the scores and stamp pseudo-labels on synthetic records.

    Real records are never touched. When no balancing threshold exists the
    assignment falls back to alternating labels in score order (warned).
    """
    synthetic = [r for r in manifest.synthetic() if r.id in scores]
    if not synthetic:
        raise StyleforgeError("no scored synthetic records to label")
    values = [scores[r.id] for r in synthetic]
    try:
        threshold, report = balance_threshold(values)
        for rec in synthetic:
            rec.score = scores[rec.id]
            rec.pseudo_label = MALIGNANT if rec.score >= threshold else BENIGN
    except BalanceError as exc:
        log.warning("balance threshold failed (%s); alternating by score order", exc)
        order = sorted(synthetic, key=lambda r: (scores[r.id], r.id))
        for pos, rec in enumerate(order):
            rec.score = scores[rec.id]
            rec.pseudo_label = MALIGNANT if pos % 2 == 0 else BENIGN
        report = PseudoLabelReport(threshold=None, counts={}, scores={}, fallback=True)
    report.scores = {r.id: scores[r.id] for r in synthetic}
    report.counts = {
        MALIGNANT: sum(1 for r in synthetic if r.pseudo_label == MALIGNANT),
        BENIGN: sum(1 for r in synthetic if r.pseudo_label == BENIGN),
    }
    return report


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class FoldEntry:
    test: list[str]
    validation: list[str]
    training: list[str]


@dataclass
class FoldPlan:
    k: int
    leakage_scope: str
    folds: list[FoldEntry]
    baseline_pool: list[str] = field(default_factory=list)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "leakage_scope": self.leakage_scope,
            "seed": self.seed,
            "baseline_pool": self.baseline_pool,
            "folds": [
                {"test": f.test, "validation": f.validation, "training": f.training}
                for f in self.folds
            ],
            **self.meta,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        obj = json.loads(Path(path).read_text())
        folds = [
            FoldEntry(test=f["test"], validation=f["validation"], training=f["training"])
            for f in obj["folds"]
        ]
        meta = {
            k: v
            for k, v in obj.items()
            if k not in ("k", "leakage_scope", "seed", "baseline_pool", "folds")
        }
        return cls(
            k=obj["k"],
            leakage_scope=obj["leakage_scope"],
            folds=folds,
            baseline_pool=obj.get("baseline_pool", []),
            seed=obj["seed"],
            meta=meta,
        )


def _stratified_groups(records, k: int, rng) -> list[list[str]]:
    groups: list[list[str]] = [[] for _ in range(k)]
    by_class: dict[str, list[str]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec.id)
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            groups[pos % k].append(ids[idx])
    return groups


def split_folds(
    manifest: DatasetManifest,
    k: int,
    seed: int,
    leakage_scope: str = "test",
    baseline_pool_fraction: float = 0.0,
) -> FoldPlan:
    """Stratified k folds over real images; synthetic-only training sets.

    Per fold, test is the fold's real images and validation is the rest;
    training keeps the synthetic images whose provenance does not touch
    the fold's leakage scope (test, or test plus validation in
    ``test_and_val`` mode, which requires that synthesis left some real
    images unused). An optional stratified baseline pool is reserved
    first for the no-synthesis training regime and stays out of every
    fold.
    """
    if k < 2:
        raise FoldError(f"need k >= 2 folds, got {k}")
    if leakage_scope not in ("test", "test_and_val"):
        raise FoldError(f"leakage_scope must be test|test_and_val, got {leakage_scope!r}")
    manifest.validate()
    real = manifest.real()
    synthetic = manifest.synthetic()

    rng = seeding.generator(seed, "folds")
    pool_ids: list[str] = []
    if baseline_pool_fraction > 0:
        by_class: dict[str, list[str]] = {}
        for rec in real:
            by_class.setdefault(rec.label, []).append(rec.id)
        for label in sorted(by_class):
            ids = sorted(by_class[label])
            n_pool = int(round(len(ids) * baseline_pool_fraction))
            order = rng.permutation(len(ids))
            pool_ids.extend(ids[i] for i in order[:n_pool])
    pool_set = set(pool_ids)
    eligible = [r for r in real if r.id not in pool_set]

    counts: dict[str, int] = {}
    for rec in eligible:
        counts[rec.label] = counts.get(rec.label, 0) + 1
    short = {label: c for label, c in counts.items() if c < k}
    if len(counts) < 2 or short:
        raise FoldError(
            f"need >= {k} real images per class outside the baseline pool; got {counts}"
        )

    groups = _stratified_groups(eligible, k, rng)
    eligible_ids = {r.id for r in eligible}
    sourced = {
        ref
        for rec in synthetic
        for ref in (rec.provenance["content_id"], rec.provenance["style_id"])
    }

    folds: list[FoldEntry] = []
    for f in range(k):
        test = sorted(groups[f])
        if leakage_scope == "test":
            validation = sorted(eligible_ids - set(test))
        else:
            validation = sorted((eligible_ids - sourced) - set(test))
            if not validation:
                raise FoldError(
                    "test_and_val scope needs real images never used for synthesis; "
                    "none available"
                )
        scope = set(test) if leakage_scope == "test" else set(test) | set(validation)
        training = sorted(
            rec.id
            for rec in synthetic
            if rec.provenance["content_id"] not in scope
            and rec.provenance["style_id"] not in scope
        )
        if synthetic and not training:
            raise FoldError(
                f"fold {f}: leakage filtering removed all {len(synthetic)} "
                f"synthetic training images"
            )
        folds.append(FoldEntry(test=test, validation=validation, training=training))
    return FoldPlan(
        k=k,
        leakage_scope=leakage_scope,
        folds=folds,
        baseline_pool=sorted(pool_ids),
        seed=seed,
    )


@dataclass(frozen=True)
class LeakageViolation:
    fold: int
    synthetic_id: str
    real_id: str


def leakage_check(plan: FoldPlan, manifest: DatasetManifest) -> list[LeakageViolation]:
    """Audit a fold plan: no training image's source may sit in its fold's scope."""
    by_id = manifest.by_id()
    violations: list[LeakageViolation] = []
    for f, fold in enumerate(plan.folds):
        scope = set(fold.test)
        if plan.leakage_scope == "test_and_val":
            scope |= set(fold.validation)
        for syn_id in fold.training:
            rec = by_id.get(syn_id)
            if rec is None or rec.provenance is None:
                violations.append(LeakageViolation(f, syn_id, "<missing provenance>"))
                continue
            for key in ("content_id", "style_id"):
                ref = rec.provenance[key]
                if ref in scope:
                    violations.append(LeakageViolation(f, syn_id, ref))
    return violations
