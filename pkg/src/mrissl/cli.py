"""Command-line entry point: prepare -> pretrain -> probe -> finetune -> evaluate -> explain -> embed.

All artifacts of one experiment live under ``<out>/<config hash>/``::

    config.yaml
    manifests/{train,val,test}.tsv     prepare_report.json
    checkpoints/{pretrain,finetune}_<tag>.pt
    reports/*.json, *.csv, *.png
    explain/<tag>/*.png
    records/<command>_<tag>.json       one RunRecord per command run

``<tag>`` is the SSL method, with ``-random`` appended for random-init baselines.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from mrissl import synthetic
from mrissl.augment import normalize_pixels, resize, to_unit_float
from mrissl.cam import CAM_METHODS, Heatmap, capture, map_statistics, overlay, to_uint8
from mrissl.checkpoint import (
    CheckpointError,
    classifier_head_from_checkpoint,
    encoder_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from mrissl.config import METHODS, PROFILES, ConfigError, ExperimentConfig, profile_defaults
from mrissl.dataset import (
    ClassTaxonomy,
    DatasetError,
    DatasetManifest,
    balance_classes,
    derive_seed,
    load_manifest,
    read_image,
    stratified_split,
)
from mrissl.embedding import embed_and_cluster
from mrissl.encoders import Classifier, Encoder, EncoderSpec
from mrissl.training import (
    classifier_checkpoint,
    evaluate,
    extract_features,
    fine_tune,
    linear_probe,
    pretrain_ssl,
)

logger = logging.getLogger("mrissl")

SPLITS = ("train", "val", "test")


class MissingArtifactError(RuntimeError):
    """A command needs the output of an earlier stage that has not run."""


class RunLockedError(RuntimeError):
    pass


@dataclass
class RunRecord:
    command: str
    config_hash: str
    phase: str
    started: str
    finished: str = ""
    artifacts: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Paths and bookkeeping for one experiment directory."""

    def __init__(self, cfg: ExperimentConfig, profile: str):
        self.cfg = cfg
        self.profile = profile
        self.hash = cfg.snapshot_hash()
        self.dir = Path(cfg.output_dir) / self.hash

    def path(self, *parts: str) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rel(self, p: Path) -> str:
        return p.relative_to(self.dir).as_posix()

    @contextmanager
    def locked(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / ".lock", "w") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise RunLockedError(f"{self.dir} is in use by another command") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def taxonomy(self) -> ClassTaxonomy:
        cfg = self.cfg
        if cfg.taxonomy_file:
            return ClassTaxonomy.from_file(cfg.taxonomy_file)
        if self.synthetic:
            return synthetic.synthetic_taxonomy(cfg.synthetic_classes, cfg.synthetic_pattern)
        return ClassTaxonomy.mri17()

    @property
    def synthetic(self) -> bool:
        return self.profile == "tiny" and not self.cfg.dataset_root

    def manifest(self, split: str) -> DatasetManifest:
        p = self.dir / "manifests" / f"{split}.tsv"
        if not p.is_file():
            raise MissingArtifactError(f"missing {split} manifest {p}; run `prepare` first")
        return DatasetManifest.load(p, self.taxonomy())

    def checkpoint(self, stage: str, tag: str) -> dict:
        p = self.dir / "checkpoints" / f"{stage}_{tag}.pt"
        if not p.is_file():
            method = tag.removesuffix("-random")
            hint = f"{stage} --method {method}" + (" --random-init" if tag.endswith("-random") else "")
            raise MissingArtifactError(f"missing {stage} checkpoint {p}; run `{hint}` first")
        return load_checkpoint(p)

    def write_text(self, rel: str, text: str, record: RunRecord) -> Path:
        p = self.path(rel)
        p.write_text(text, encoding="utf-8")
        record.artifacts.append(self.rel(p))
        return p

    def write_record(self, record: RunRecord, name: str) -> Path:
        record.finished = _now()
        p = self.path("records", f"{name}.json")
        p.write_text(json.dumps(asdict(record), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


# --------------------------------------------------------------------------
# plotting


def _plot_curve(curve: dict, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = np.arange(1, len(curve["train"]) + 1)
    ax.plot(epochs, curve["train"], label="train")
    if curve.get("val"):
        ax.plot(epochs[: len(curve["val"])], curve["val"], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_scatter(coords: np.ndarray, labels: np.ndarray, clusters: np.ndarray, classes, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    cmap = plt.get_cmap("tab20")
    for k, name in enumerate(classes):
        sel = labels == k
        axes[0].scatter(coords[sel, 0], coords[sel, 1], s=8, color=cmap(k % 20), label=name)
    axes[0].set_title("ground truth")
    axes[0].legend(fontsize=6, markerscale=2)
    axes[1].scatter(coords[:, 0], coords[:, 1], s=8, c=[cmap(c % 20) for c in clusters])
    axes[1].set_title("KMeans clusters")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------
# commands


def _tag(method: str, random_init: bool) -> str:
    return f"{method}-random" if random_init else method


def cmd_prepare(run: Run, args) -> RunRecord:
    cfg = run.cfg
    rec = RunRecord("prepare", run.hash, "prepare", _now())
    taxonomy = run.taxonomy()
    if run.synthetic:
        sizes = {"train": cfg.synthetic_train_per_class, "val": cfg.synthetic_val_per_class,
                 "test": cfg.synthetic_test_per_class}
        parts = {}
        for split, n in sizes.items():
            parts[split] = synthetic.write_dataset(
                run.dir / "data" / split, n, cfg.synthetic_classes, size=32,
                seed=derive_seed("synthetic", cfg.seed, split) % 2**32, pattern=cfg.synthetic_pattern,
            )
            rec.artifacts.append(f"data/{split}/")
        before = {s: m.counts for s, m in parts.items()}
        after = before
        source = {"synthetic": cfg.synthetic_pattern}
    else:
        full = load_manifest(cfg.dataset_root, taxonomy)
        skipped = list(full.skipped)
        before = {"all": full.counts}
        if cfg.balance_target > 0:
            full = balance_classes(full, cfg.balance_target, cfg.seed)
        after = {"all": full.counts}
        train, val, test = stratified_split(full, cfg.split_spec())
        parts = {"train": train, "val": val, "test": test}
        source = {"dataset_root": cfg.dataset_root, "skipped": skipped}
    for split, m in parts.items():
        run.write_text(f"manifests/{split}.tsv", m.to_tsv(), rec)
    report = {
        "config_hash": run.hash,
        "classes": list(taxonomy.classes),
        "counts_before_balancing": before,
        "counts_after_balancing": after,
        "totals": {"before": sum(sum(c.values()) for c in before.values()),
                   "after": sum(sum(c.values()) for c in after.values())},
        "split_sizes": {s: len(m) for s, m in parts.items()},
        "source": source,
    }
    run.write_text("prepare_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n", rec)
    run.write_text("config.yaml", cfg.to_text(), rec)
    print(f"prepared {report['totals']['before']} -> {report['totals']['after']} records; "
          f"split {report['split_sizes']}")
    return rec


def cmd_pretrain(run: Run, args) -> RunRecord:
    cfg = run.cfg
    method = cfg.method_config(args.method)
    rec = RunRecord("pretrain", run.hash, "pretrain", _now(), details={"method": args.method})
    train, val = run.manifest("train"), run.manifest("val")
    res = pretrain_ssl(
        method, EncoderSpec.from_kind(cfg.encoder), train, cfg.hyperparams(), cfg.ssl_augmentation(), val=val,
        balance_aug=cfg.augmentation(), proj_hidden=cfg.projection_hidden_dim, proj_dim=cfg.projection_dim,
        metadata={"config_hash": run.hash},
    )
    p = save_checkpoint(res.checkpoint, run.path("checkpoints", f"pretrain_{args.method}.pt"))
    rec.artifacts.append(run.rel(p))
    run.write_text(f"reports/pretrain_{args.method}_loss.csv", res.curve.to_csv(), rec)
    png = run.path("reports", f"pretrain_{args.method}_loss.png")
    _plot_curve(res.curve.to_dict(), png, f"{args.method} pretraining")
    rec.artifacts.append(run.rel(png))
    rec.details.update(best_epoch=res.best_epoch, lr=method.lr_ssl, temperature=method.temperature,
                       epochs=cfg.epochs_ssl)
    print(f"pretrained {args.method}: {cfg.epochs_ssl} epochs, best epoch {res.best_epoch}, "
          f"final loss {res.curve.train[-1]:.4f}")
    return rec


def cmd_probe(run: Run, args) -> RunRecord:
    cfg = run.cfg
    tag = _tag(args.method, args.random_init)
    rec = RunRecord("probe", run.hash, "linear", _now(), details={"method": args.method})
    ckpt = None if args.random_init else run.checkpoint("pretrain", args.method)
    train, val = run.manifest("train"), run.manifest("val")
    res = linear_probe(ckpt, train, val, cfg.hyperparams(), cfg.method_config(args.method),
                       spec=EncoderSpec.from_kind(cfg.encoder), balance_aug=cfg.augmentation())
    res.report.config_hash = run.hash
    res.report.manifest = "manifests/val.tsv"
    res.report.extra.update(method=args.method, random_init=args.random_init, encoder_checksum=res.encoder_checksum)
    run.write_text(f"reports/probe_{tag}.json", res.report.to_json() + "\n", rec)
    run.write_text(f"reports/probe_{tag}_loss.csv", res.curve.to_csv(), rec)
    print(f"linear probe {tag}: accuracy {res.report.accuracy:.4f}")
    return rec


def cmd_finetune(run: Run, args) -> RunRecord:
    cfg = run.cfg
    tag = _tag(args.method, args.random_init)
    rec = RunRecord("finetune", run.hash, "finetune", _now(), details={"method": args.method})
    ckpt = None if args.random_init else run.checkpoint("pretrain", args.method)
    train, val = run.manifest("train"), run.manifest("val")
    res = fine_tune(ckpt, train, val, cfg.hyperparams(), cfg.method_config(args.method),
                    train_aug=cfg.augmentation(), spec=EncoderSpec.from_kind(cfg.encoder),
                    balance_aug=cfg.augmentation())
    taxonomy = list(train.taxonomy.classes)
    out = classifier_checkpoint(res.model, {"method": args.method, "taxonomy": taxonomy, "config_hash": run.hash,
                                            "best_epoch": res.best_epoch, "phase": "finetune"})
    p = save_checkpoint(out, run.path("checkpoints", f"finetune_{tag}.pt"))
    rec.artifacts.append(run.rel(p))
    res.report.config_hash = run.hash
    res.report.manifest = "manifests/val.tsv"
    run.write_text(f"reports/finetune_{tag}.json", res.report.to_json() + "\n", rec)
    run.write_text(f"reports/finetune_{tag}_loss.csv", res.curve.to_csv(), rec)
    png = run.path("reports", f"finetune_{tag}_loss.png")
    _plot_curve(res.curve.to_dict(), png, f"{tag} fine-tuning")
    rec.artifacts.append(run.rel(png))
    rec.details.update(best_epoch=res.best_epoch, stopped_epoch=res.stopped_epoch)
    print(f"fine-tuned {tag}: validation accuracy {res.report.accuracy:.4f}, "
          f"best epoch {res.best_epoch}, stopped at {res.stopped_epoch}")
    return rec


def _load_classifier(run: Run, tag: str) -> Classifier:
    ckpt = run.checkpoint("finetune", tag)
    return Classifier(encoder_from_checkpoint(ckpt), classifier_head_from_checkpoint(ckpt)).eval()


def _manifest_arg(run: Run, args) -> tuple[DatasetManifest, str]:
    if getattr(args, "manifest", None):
        return DatasetManifest.load(args.manifest, run.taxonomy()), str(args.manifest)
    return run.manifest(args.split), f"manifests/{args.split}.tsv"


def cmd_evaluate(run: Run, args) -> RunRecord:
    cfg = run.cfg
    tag = _tag(args.method, args.random_init)
    rec = RunRecord("evaluate", run.hash, "test", _now(), details={"method": args.method})
    model = _load_classifier(run, tag)
    manifest, name = _manifest_arg(run, args)
    report = evaluate(model, manifest, cfg.hyperparams(), cfg.augmentation(), phase="test")
    report.config_hash = run.hash
    report.manifest = name
    suffix = Path(name).stem
    run.write_text(f"reports/evaluate_{tag}_{suffix}.json", report.to_json() + "\n", rec)
    print(f"evaluated {tag} on {name}: accuracy {report.accuracy:.4f}, weighted F1 {report.f1_weighted:.4f}")
    rec.details["report_name"] = suffix
    return rec


def _parse_region(text: Optional[str]) -> Optional[tuple[int, int, int, int]]:
    if not text:
        return None
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("--region expects top,left,bottom,right")
    return tuple(parts)


def cmd_explain(run: Run, args) -> RunRecord:
    cfg = run.cfg
    tag = _tag(args.method, args.random_init)
    rec = RunRecord("explain", run.hash, "explain", _now(), details={"method": args.method})
    model = _load_classifier(run, tag)
    taxonomy = run.taxonomy()
    if args.image:
        items = [(str(p), None) for p in args.image]
    else:
        test = run.manifest("test")
        items = [(r.path, taxonomy.index(r.label)) for r in test.records[: args.count]]
    if args.target == "true" and any(label is None for _, label in items):
        raise ConfigError("--target true needs images from the test manifest")
    region = _parse_region(args.region)
    methods = args.cams.split(",")
    for m in methods:
        if m not in CAM_METHODS:
            raise ConfigError(f"unknown CAM method {m!r}; choose from {', '.join(CAM_METHODS)}")
    r = model.encoder.spec.input_resolution
    mean, std = (cfg.normalize_mean,) * 3, (cfg.normalize_std,) * 3
    sidecar = {"config_hash": run.hash, "method": args.method, "target": args.target, "region": region, "images": []}
    for path, label in items:
        gray = to_unit_float(read_image(path))
        model_in = gray if gray.shape == (r, r) else resize(gray, (r, r))
        x = torch.from_numpy(normalize_pixels(model_in, mean, std))
        if args.class_index is not None:
            c = args.class_index
        elif args.target == "true":
            c = label
        else:
            c = None
        cap = capture(model, x, class_index=c)
        entry = {"path": path, "class_index": cap.class_index, "class": taxonomy.classes[cap.class_index],
                 "true_class": taxonomy.classes[label] if label is not None else None, "maps": {}}
        for m in methods:
            hm: Heatmap = CAM_METHODS[m](cap).minmax()
            rgb = overlay(hm, gray)
            out = run.path("explain", tag, f"{Path(path).stem}_{m}.png")
            Image.fromarray(to_uint8(rgb), mode="RGB").save(out)
            rec.artifacts.append(run.rel(out))
            stats = map_statistics(hm.upsample(gray.shape), region)
            entry["maps"][m] = {**stats, "overlay": run.rel(out)}
        sidecar["images"].append(entry)
    run.write_text(f"explain/{tag}/maps.json", json.dumps(sidecar, indent=2, sort_keys=True) + "\n", rec)
    print(f"explained {len(items)} image(s) with {', '.join(methods)}")
    return rec


def cmd_embed(run: Run, args) -> RunRecord:
    cfg = run.cfg
    tag = _tag(args.method, args.random_init)
    rec = RunRecord("embed", run.hash, "embed", _now(), details={"method": args.method, "source": args.source})
    if args.random_init:
        torch.manual_seed(cfg.seed)
        encoder = Encoder(EncoderSpec.from_kind(cfg.encoder))
    else:
        stage = "finetune" if args.source == "finetune" else "pretrain"
        encoder = encoder_from_checkpoint(run.checkpoint(stage, args.method))
    manifest, name = _manifest_arg(run, args)
    feats, labels = extract_features(encoder, manifest, cfg.hyperparams(), cfg.augmentation())
    res = embed_and_cluster(feats.numpy(), labels.numpy(), k=cfg.kmeans_clusters, seed=cfg.seed,
                            perplexity=cfg.tsne_perplexity, max_iter=cfg.tsne_iterations,
                            paths=[r.path for r in manifest.records])
    stem = f"reports/embed_{tag}_{args.source}_{Path(name).stem}"
    classes = manifest.taxonomy.classes
    run.write_text(f"{stem}.csv", res.to_csv(classes), rec)
    summary = {**res.summary(), "config_hash": run.hash, "manifest": name}
    run.write_text(f"{stem}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", rec)
    png = run.path(f"{stem}.png")
    _plot_scatter(res.coordinates, res.labels, res.clusters, classes, png)
    rec.artifacts.append(run.rel(png))
    rec.details["report_name"] = Path(stem).name
    print(f"embedded {len(labels)} samples: adjusted Rand index {res.agreement:.4f}")
    return rec


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "embed": cmd_embed,
}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrissl", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="flat key-value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--profile", choices=PROFILES, default="paper")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out", type=Path, help="output root (default: output_dir from the config)")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("prepare", help="index, balance and split the dataset")

    def with_method(p, random_init=True):
        p.add_argument("--method", choices=METHODS)
        if random_init:
            p.add_argument("--random-init", action="store_true", help="use a randomly initialized encoder")
        return p

    with_method(sub.add_parser("pretrain", help="self-supervised pretraining"), random_init=False)
    with_method(sub.add_parser("probe", help="linear evaluation on frozen features"))
    with_method(sub.add_parser("finetune", help="supervised fine-tuning with early stopping"))

    p = with_method(sub.add_parser("evaluate", help="metrics of a fine-tuned model"))
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--manifest", type=Path, help="evaluate on this manifest instead of a split")

    p = with_method(sub.add_parser("explain", help="class-activation overlays"))
    p.add_argument("--image", type=Path, action="append", help="image to explain (repeatable)")
    p.add_argument("--count", type=int, default=4, help="number of test images when --image is absent")
    p.add_argument("--cams", default="gradcam,gradcampp,eigencam")
    p.add_argument("--target", choices=("predicted", "true"), default="predicted",
                   help="which class score to explain")
    p.add_argument("--class-index", type=int, help="explain this class index")
    p.add_argument("--region", help="top,left,bottom,right pixel box for mass statistics")

    p = with_method(sub.add_parser("embed", help="t-SNE scatter and KMeans agreement"))
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--source", choices=("pretrain", "finetune"), default="pretrain")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = profile_defaults(args.profile)
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file {args.config} not found")
        cfg = ExperimentConfig.from_file(args.config, base=cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if overrides:
        cfg = ExperimentConfig.from_mapping(overrides, base=cfg)
    return cfg


def check_paths(cfg: ExperimentConfig, profile: str) -> None:
    if cfg.dataset_root and not Path(cfg.dataset_root).is_dir():
        raise ConfigError(f"dataset_root {cfg.dataset_root} does not exist")
    if cfg.taxonomy_file and not Path(cfg.taxonomy_file).is_file():
        raise ConfigError(f"taxonomy_file {cfg.taxonomy_file} does not exist")
    if not cfg.dataset_root and profile != "tiny":
        raise ConfigError("dataset_root is required outside the tiny profile")


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if getattr(args, "method", None) is None and hasattr(args, "method"):
            args.method = cfg.method
        check_paths(cfg, args.profile)
        torch.manual_seed(cfg.seed)
        run = Run(cfg, args.profile)
        with run.locked():
            record = COMMANDS[args.command](run, args)
            name = args.command
            if args.command != "prepare":
                name += "_" + _tag(args.method, getattr(args, "random_init", False))
            if "report_name" in record.details:
                name += "_" + record.details["report_name"]
            run.write_record(record, name)
        print(f"run directory: {run.dir}")
        return 0
    except (ConfigError, DatasetError, CheckpointError, MissingArtifactError, RunLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
