"""Command-line surface: stage subcommands plus run-all orchestration.

Each subcommand reads its declared inputs from the dataset root, writes
its declared outputs, and skips work whose outputs already exist unless
--force-rerun is given. Exit codes: 0 success, 1 usage error, 2
data/validation error.
"""

from __future__ import annotations

import json
import multiprocessing
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import featnet, pipeline, trainer
from .config import ExperimentConfig, load_config, resolve_seed
from .errors import LeakageError, StyleforgeError
from .nst import StyleTransferConfig


# ---------------------------------------------------------------------------
# shared context and artifact layout
# ---------------------------------------------------------------------------


class Context:
    def __init__(self, cfg: ExperimentConfig, force: bool, jobs: int | None):
        self.cfg = cfg
        self.force = force
        self.jobs = jobs
        self.digest = cfg.digest()

    @property
    def root(self) -> Path:
        return self.cfg.root()

    def path(self, name: str) -> Path:
        return self.root / name

    def png_text(self) -> dict[str, str]:
        return {"styleforge-digest": self.digest, "styleforge-seed": str(self.cfg.seed)}

    def meta(self) -> dict:
        return {"config_digest": self.digest, "seed": self.cfg.seed}

    def parallelism(self) -> int:
        if self.jobs is not None and self.jobs > 0:
            return self.jobs
        configured = self.cfg.synth.parallelism
        if configured > 0:
            return configured
        return min(4, multiprocessing.cpu_count())

    def fresh(self, *paths: Path) -> bool:
        """True when the stage must run (an output is missing or --force-rerun)."""
        if self.force:
            return True
        return not all(p.exists() for p in paths)


def _echo_skip(name: str, outputs) -> None:
    click.echo(f"[{name}] outputs exist, skipping (use --force-rerun to redo)")


def _style_config(cfg: ExperimentConfig) -> StyleTransferConfig:
    n = cfg.nst
    return StyleTransferConfig(
        content_weight=n.content_weight,
        style_weight=n.style_weight,
        content_layer=n.content_layer,
        style_layers=tuple(n.style_layers),
        iterations=n.iterations,
        learning_rate=n.learning_rate,
        init=n.init,
        pooling=n.pooling,
    )


def _train_config(cfg: ExperimentConfig) -> trainer.TrainConfig:
    t = cfg.train
    return trainer.TrainConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        dropout=t.dropout,
        patience=t.patience,
        augment=cfg.augment.ranges(),
        seed=cfg.seed,
    )


def _load_manifest(ctx: Context, with_synth: bool = False) -> pipeline.DatasetManifest:
    paths = [ctx.path("manifest.jsonl")]
    if with_synth and ctx.path("synth.jsonl").exists():
        paths.append(ctx.path("synth.jsonl"))
    for p in paths:
        if not p.exists():
            raise StyleforgeError(f"missing input {p}; run earlier stages first")
    return pipeline.DatasetManifest.load(*paths)


def _load_featnet(ctx: Context):
    spec = featnet.feature_net_spec(ctx.cfg.dataset.size)
    path = ctx.path("featnet.sfwb")
    if not path.exists():
        raise StyleforgeError(f"missing feature network {path}; run train-featnet first")
    return spec, featnet.load_weights(path, spec)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_gen_data(ctx: Context) -> None:
    out = ctx.path("manifest.jsonl")
    if not ctx.fresh(out):
        _echo_skip("gen-data", [out])
        return
    cfg = ctx.cfg
    manifest = pipeline.gen_corpus(
        ctx.root,
        cfg.dataset.per_class,
        (cfg.dataset.size, cfg.dataset.size),
        seed=cfg.seed,
        meta=ctx.meta(),
    )
    manifest.save(out)
    click.echo(f"[gen-data] wrote {len(manifest.records)} images under {ctx.root}")


def stage_train_featnet(ctx: Context) -> None:
    out = ctx.path("featnet.sfwb")
    if not ctx.fresh(out):
        _echo_skip("train-featnet", [out])
        return
    cfg = ctx.cfg
    manifest = _load_manifest(ctx)
    arrays, ids = pipeline.load_corpus_arrays(manifest, ctx.root, manifest.real())
    by_id = manifest.by_id()
    corpus = [(by_id[i].label, arr) for arr, i in zip(arrays, ids)]
    spec = featnet.feature_net_spec(cfg.dataset.size)
    fn = cfg.featnet
    bundle = featnet.train_feature_extractor(
        corpus,
        spec,
        featnet.FeatnetTrainConfig(
            epochs=fn.epochs,
            batch_size=fn.batch_size,
            learning_rate=fn.learning_rate,
            holdout_fraction=fn.holdout_fraction,
        ),
        seed=cfg.seed,
    )
    bundle.meta["config_digest"] = ctx.digest
    featnet.save_weights(bundle, out)
    click.echo(
        f"[train-featnet] holdout accuracy {bundle.meta['holdout_accuracy']}, wrote {out}"
    )


def stage_synth(ctx: Context) -> None:
    out = ctx.path("synth.jsonl")
    if not ctx.fresh(out):
        _echo_skip("synth", [out])
        return
    cfg = ctx.cfg
    manifest = _load_manifest(ctx)
    spec, bundle = _load_featnet(ctx)
    plan = pipeline.plan_pairs(manifest, cfg.synth.budget, seed=cfg.seed)
    batch = pipeline.run_synthesis_batch(
        plan,
        manifest,
        ctx.root,
        spec,
        bundle,
        _style_config(cfg),
        parallelism=ctx.parallelism(),
        png_text=ctx.png_text(),
    )
    synth_manifest = pipeline.DatasetManifest(records=batch.records, meta=ctx.meta())
    synth_manifest.save(out)
    click.echo(
        f"[synth] {len(batch.records)} images synthesized "
        f"({len(batch.failures)} failures) -> {out}"
    )


def stage_pseudo_label(ctx: Context) -> None:
    out = ctx.path("pseudo_label_report.json")
    synth_path = ctx.path("synth.jsonl")
    if not ctx.fresh(out):
        _echo_skip("pseudo-label", [out])
        return
    if not ctx.cfg.pseudo_label.enabled:
        click.echo("[pseudo-label] disabled in config, nothing to do")
        return
    manifest = _load_manifest(ctx, with_synth=True)
    if not manifest.synthetic():
        raise StyleforgeError("no synthetic records to label; run synth first")
    spec, bundle = _load_featnet(ctx)
    model = trainer.ClassifierModel(spec=spec, weights=bundle, arch=spec.name)
    scores, errors = pipeline.pseudo_label_scores(model, manifest.synthetic(), ctx.root)
    report = pipeline.assign_pseudo_labels(manifest, scores)
    synth_manifest = pipeline.DatasetManifest(records=manifest.synthetic(), meta=ctx.meta())
    synth_manifest.save(synth_path)
    payload = {
        **ctx.meta(),
        "threshold": report.threshold,
        "counts": report.counts,
        "fallback": report.fallback,
        "unreadable": errors,
        "scores": {k: report.scores[k] for k in sorted(report.scores)},
    }
    out.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    click.echo(f"[pseudo-label] threshold {report.threshold}, counts {report.counts}")


def stage_split(ctx: Context) -> None:
    out = ctx.path("folds.json")
    if not ctx.fresh(out):
        _echo_skip("split", [out])
        return
    cfg = ctx.cfg
    manifest = _load_manifest(ctx, with_synth=True)
    plan = pipeline.split_folds(
        manifest,
        k=cfg.folds.k,
        seed=cfg.seed,
        leakage_scope=cfg.folds.leakage_scope,
        baseline_pool_fraction=cfg.folds.baseline_pool_fraction,
    )
    violations = pipeline.leakage_check(plan, manifest)
    if violations:
        listing = "; ".join(
            f"fold {v.fold}: {v.synthetic_id} sources {v.real_id}" for v in violations[:10]
        )
        raise LeakageError(
            f"{len(violations)} leakage violations: {listing}", violations=violations
        )
    plan.meta = ctx.meta()
    plan.save(out)
    click.echo(f"[split] {plan.k} folds, baseline pool {len(plan.baseline_pool)} -> {out}")


def _model_path(ctx: Context, arch: str, regime: str, fold: int) -> Path:
    return ctx.path(f"models/{arch}-{regime}-fold{fold}.sfwb")


def _metrics_path(ctx: Context, arch: str, regime: str, fold: int) -> Path:
    return ctx.path(f"metrics/{arch}-{regime}-fold{fold}.json")


def _regime_training_ids(plan: pipeline.FoldPlan, regime: str, fold: pipeline.FoldEntry):
    if regime == "without_da":
        if not plan.baseline_pool:
            raise StyleforgeError(
                "regime without_da needs folds.baseline_pool_fraction > 0"
            )
        return plan.baseline_pool
    if regime == "with_da":
        return None  # fold's synthetic training set
    raise StyleforgeError(f"unknown regime {regime!r}")


def stage_train(ctx: Context, only_arch: str | None = None) -> None:
    cfg = ctx.cfg
    manifest = _load_manifest(ctx, with_synth=True)
    plan = pipeline.FoldPlan.load(ctx.path("folds.json"))
    arches = [only_arch] if only_arch else list(cfg.train.architectures)
    tcfg = _train_config(cfg)
    for arch in arches:
        spec = featnet.classifier_spec(arch, cfg.dataset.size)
        for regime in cfg.train.regimes:
            for f, fold in enumerate(plan.folds):
                model_out = _model_path(ctx, arch, regime, f)
                metrics_out = _metrics_path(ctx, arch, regime, f)
                if not ctx.fresh(model_out, metrics_out):
                    _echo_skip(f"train {arch}/{regime}/fold{f}", [model_out])
                    continue
                training_ids = _regime_training_ids(plan, regime, fold)
                model, metrics = trainer.train_classifier(
                    spec,
                    fold,
                    manifest,
                    ctx.root,
                    tcfg,
                    training_ids=training_ids,
                    fold_index=f,
                    regime=regime,
                )
                model.weights.meta["config_digest"] = ctx.digest
                featnet.save_weights(model.weights, model_out)
                metrics.save(metrics_out, extra=ctx.meta())
                click.echo(
                    f"[train] {arch}/{regime}/fold{f}: val AUC {metrics.val_auc:.3f} "
                    f"(stopped epoch {metrics.stopped_epoch})"
                )


def stage_evaluate(ctx: Context) -> None:
    cfg = ctx.cfg
    manifest = _load_manifest(ctx, with_synth=True)
    plan = pipeline.FoldPlan.load(ctx.path("folds.json"))
    for arch in cfg.train.architectures:
        spec = featnet.classifier_spec(arch, cfg.dataset.size)
        for regime in cfg.train.regimes:
            for f, fold in enumerate(plan.folds):
                metrics_path = _metrics_path(ctx, arch, regime, f)
                if not metrics_path.exists():
                    raise StyleforgeError(f"missing metrics {metrics_path}; run train first")
                payload = json.loads(metrics_path.read_text())
                if payload.get("test_auc") is not None and not ctx.force:
                    _echo_skip(f"evaluate {arch}/{regime}/fold{f}", [metrics_path])
                    continue
                bundle = featnet.load_weights(_model_path(ctx, arch, regime, f), spec)
                model = trainer.ClassifierModel(spec=spec, weights=bundle, arch=arch)
                payload["test_auc"] = trainer.evaluate_fold(model, fold, manifest, ctx.root)
                metrics_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
                click.echo(
                    f"[evaluate] {arch}/{regime}/fold{f}: test AUC {payload['test_auc']:.3f}"
                )


def emit_report(metrics_paths, meta: dict | None = None) -> trainer.ExperimentReport:
    """Aggregate metrics files into the per-fold AUC report."""
    if not metrics_paths:
        raise StyleforgeError("emit_report: no metrics files given")
    per_key: dict[tuple[str, str], dict[int, float]] = {}
    for path in metrics_paths:
        payload = json.loads(Path(path).read_text())
        auc_value = payload.get("test_auc")
        if auc_value is None:
            raise StyleforgeError(f"{path}: no test_auc; run evaluate first")
        key = (payload["arch"], payload["regime"])
        per_key.setdefault(key, {})[int(payload["fold"])] = float(auc_value)
    fold_aucs = {}
    sizes = {len(v) for v in per_key.values()}
    if len(sizes) != 1:
        raise StyleforgeError(f"emit_report: mismatched fold counts {sorted(sizes)}")
    for key, folds in per_key.items():
        fold_aucs[key] = [folds[i] for i in sorted(folds)]
    return trainer.aggregate_results(fold_aucs, meta=meta)


def stage_report(ctx: Context) -> None:
    out_json = ctx.path("report.json")
    out_text = ctx.path("report.txt")
    if not ctx.fresh(out_json, out_text):
        _echo_skip("report", [out_json])
        return
    metrics_dir = ctx.path("metrics")
    metrics_paths = sorted(metrics_dir.glob("*.json")) if metrics_dir.exists() else []
    report = emit_report(metrics_paths, meta=ctx.meta())
    out_json.write_text(json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n")
    text = trainer.render_report_text(report)
    out_text.write_text(text)
    click.echo(text.rstrip("\n"))
    click.echo(f"[report] wrote {out_json} and {out_text}")


STAGES = (
    ("gen-data", stage_gen_data),
    ("train-featnet", stage_train_featnet),
    ("synth", stage_synth),
    ("pseudo-label", stage_pseudo_label),
    ("split", stage_split),
    ("train", stage_train),
    ("evaluate", stage_evaluate),
    ("report", stage_report),
)


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _build_context(config_path, seed, force, jobs, per_class=None, size=None) -> Context:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    cfg = resolve_seed(cfg, seed)
    if per_class is not None or size is not None:
        dataset = replace(
            cfg.dataset,
            **{
                k: v
                for k, v in {"per_class": per_class, "size": size}.items()
                if v is not None
            },
        )
        cfg = replace(cfg, dataset=dataset)
    return Context(cfg, force=force, jobs=jobs)


common_options = [
    click.option("--config", "-c", "config_path", type=click.Path(), default=None,
                 help="Experiment TOML file (defaults to built-in desk settings)."),
    click.option("--seed", type=int, default=None,
                 help="Override the config/env seed."),
    click.option("--force-rerun", "force", is_flag=True,
                 help="Recompute outputs even when they already exist."),
    click.option("--jobs", type=int, default=None,
                 help="Worker processes for synthesis (default: config/auto)."),
]


def with_common(fn):
    for option in reversed(common_options):
        fn = option(fn)
    return fn


@click.group(name="styleforge")
def cli() -> None:
    """Desk-scale style-transfer augmentation experiments."""


@cli.command("gen-data")
@with_common
@click.option("--per-class", type=int, default=None, help="Real images per class.")
@click.option("--size", type=int, default=None, help="Square image size in pixels.")
def cmd_gen_data(config_path, seed, force, jobs, per_class, size):
    """Generate the two-class desk corpus and its manifest."""
    stage_gen_data(_build_context(config_path, seed, force, jobs, per_class, size))


def _simple_command(name: str, stage, help_text: str):
    @cli.command(name, help=help_text)
    @with_common
    def _cmd(config_path, seed, force, jobs, _stage=stage):
        _stage(_build_context(config_path, seed, force, jobs))
    _cmd.__name__ = f"cmd_{name.replace('-', '_')}"
    return _cmd


_simple_command("train-featnet", stage_train_featnet,
                "Train the feature-extraction network on the corpus.")
_simple_command("synth", stage_synth,
                "Synthesize the style-transfer training images.")
_simple_command("pseudo-label", stage_pseudo_label,
                "Score synthetic images and assign balanced pseudo-labels.")
_simple_command("split", stage_split,
                "Build leakage-filtered cross-validation folds.")
_simple_command("evaluate", stage_evaluate,
                "Compute test-fold AUC for every trained model.")
_simple_command("report", stage_report,
                "Aggregate metrics into the per-fold AUC table.")


@cli.command("train")
@with_common
@click.option("--arch", type=str, default=None, help="Train only this architecture.")
def cmd_train(config_path, seed, force, jobs, arch):
    """Train classifiers on every fold and regime."""
    stage_train(_build_context(config_path, seed, force, jobs), only_arch=arch)


@cli.command("run-all")
@with_common
def cmd_run_all(config_path, seed, force, jobs):
    """Run the whole pipeline: gen-data through report."""
    ctx = _build_context(config_path, seed, force, jobs)
    for name, stage in STAGES:
        stage(ctx)


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, prog_name="styleforge", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except StyleforgeError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def entry() -> None:  # console-script shim
    sys.exit(main())


if __name__ == "__main__":
    entry()
