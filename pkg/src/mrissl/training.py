"""SSL pretraining, linear probing, fine-tuning, and evaluation loops."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call
from torch.utils.data import DataLoader, Dataset

from mrissl import objectives as obj
from mrissl.augment import AugmentationConfig, augment_image, normalize_pixels, resize, sample_two_views, to_unit_float
from mrissl.checkpoint import encoder_from_checkpoint, load_checkpoint, make_checkpoint
from mrissl.config import SSLMethodConfig, TrainingHyperparams
from mrissl.dataset import AUGMENTED, ClassTaxonomy, DatasetManifest, SampleRecord, TaxonomyMismatchError, derive_seed, read_image
from mrissl.encoders import (
    ClassifierHead,
    ClassifierHeadSpec,
    Classifier,
    DINOHead,
    Encoder,
    EncoderSpec,
    MLPHead,
    PredictionHeadSpec,
    ProjectionHeadSpec,
    parameter_checksum,
)
from mrissl.metrics import EarlyStopState, MetricsReport, compute_metrics, early_stop_step

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossCurve:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def append(self, train_loss: float, val_loss: Optional[float] = None) -> None:
        self.train.append(float(train_loss))
        if val_loss is not None:
            self.val.append(float(val_loss))

    def __len__(self) -> int:
        return len(self.train)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val)}

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for i, t in enumerate(self.train):
            v = self.val[i] if i < len(self.val) else ""
            rows.append(f"{i + 1},{t!r},{v!r}" if v != "" else f"{i + 1},{t!r},")
        return "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# data


class ImageCache:
    """Decoded source images at the encoder resolution, keyed by path."""

    def __init__(self, resolution: int):
        self.resolution = resolution
        self._cache: dict[str, np.ndarray] = {}

    def __getitem__(self, path: str) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            img = to_unit_float(read_image(path))
            if img.shape != (self.resolution, self.resolution):
                img = resize(img, (self.resolution, self.resolution))
            self._cache[path] = img
        return img


def materialize(record: SampleRecord, cache: ImageCache, balance_aug: AugmentationConfig) -> np.ndarray:
    """Source image of a record; balancing replicas are replayed from their seed."""
    img = cache[record.path]
    if record.origin == AUGMENTED:
        img = augment_image(img, balance_aug, record.seed)
    return img


class _ManifestDataset(Dataset):
    def __init__(self, manifest: DatasetManifest, cache: ImageCache, balance_aug: AugmentationConfig,
                 mean: float, std: float):
        self.records = manifest.records
        self.labels = manifest.labels()
        self.cache = cache
        self.balance_aug = balance_aug
        self.mean = (mean,) * 3
        self.std = (std,) * 3
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.records)

    def _norm(self, img: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(normalize_pixels(img, self.mean, self.std))


class SupervisedDataset(_ManifestDataset):
    def __init__(self, *args, train_aug: Optional[AugmentationConfig] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.train_aug = train_aug

    def __getitem__(self, i):
        rec = self.records[i]
        img = materialize(rec, self.cache, self.balance_aug)
        if self.train_aug is not None:
            img = augment_image(img, self.train_aug, derive_seed("train", rec.seed, self.epoch))
        return self._norm(img), int(self.labels[i])


class TwoViewDataset(_ManifestDataset):
    def __init__(self, *args, view_aug: AugmentationConfig, fixed_views: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.view_aug = view_aug
        self.fixed_views = fixed_views

    def __getitem__(self, i):
        rec = self.records[i]
        img = materialize(rec, self.cache, self.balance_aug)
        epoch = 0 if self.fixed_views else self.epoch
        r = self.cache.resolution
        v1, v2 = sample_two_views(img, self.view_aug, derive_seed("ssl", rec.seed, epoch), (r, r))
        return self._norm(v1), self._norm(v2)


def _loader(ds: _ManifestDataset, batch_size: int, seed: int, epoch: int, shuffle: bool,
            workers: int = 0, drop_last: bool = False) -> DataLoader:
    ds.epoch = epoch
    gen = torch.Generator().manual_seed(derive_seed("order", seed, epoch) % (2**63))
    drop_last = drop_last and len(ds) > batch_size
    return DataLoader(ds, batch_size=batch_size, shuffle=shuffle, generator=gen,
                      num_workers=workers, drop_last=drop_last)


# --------------------------------------------------------------------------
# SSL model


class Branch(nn.Module):
    """Encoder plus the head whose output feeds the objective."""

    def __init__(self, encoder: Encoder, head: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))


class SSLModel(nn.Module):
    """Online network for one objective, plus its momentum target where needed."""

    def __init__(self, method: SSLMethodConfig, spec: EncoderSpec, proj_hidden: int = 512, proj_dim: int = 128):
        super().__init__()
        self.method = method
        encoder = Encoder(spec)
        proj_spec = ProjectionHeadSpec.for_encoder(spec, proj_hidden, proj_dim, method.head_batchnorm)
        if method.method == "dino":
            head: nn.Module = DINOHead(proj_spec, method.dino_out_dim)
        else:
            head = MLPHead(proj_spec)
        self.online = Branch(encoder, head)
        self.predictor = (
            MLPHead(PredictionHeadSpec.for_projection(proj_spec)) if method.method in ("byol", "mocov3") else None
        )
        self.target: Optional[Branch] = None
        self.momentum: Optional[obj.MomentumState] = None
        self.center: Optional[obj.CenterState] = None
        if method.uses_momentum_target:
            self.target = copy.deepcopy(self.online)
            for p in self.target.parameters():
                p.requires_grad_(False)
            self.momentum = obj.MomentumState.from_named(self.online.named_parameters())
        if method.method == "dino":
            self.center = obj.CenterState.zeros(method.dino_out_dim, method.dino_center_momentum)

    @property
    def encoder(self) -> Encoder:
        return self.online.encoder

    def _target_forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return functional_call(self.target, dict(self.momentum.params), (x,))

    def loss(self, v1: torch.Tensor, v2: torch.Tensor, update_state: bool = True) -> torch.Tensor:
        m = self.method
        n = v1.shape[0]
        out = self.online(torch.cat([v1, v2]))
        o1, o2 = out[:n], out[n:]
        if m.method == "simclr":
            z = obj.l2_normalize(out)
            return obj.nt_xent_loss(obj.interleave(z[:n], z[n:]), m.temperature)[0]
        t = self._target_forward(torch.cat([v1, v2]))
        t1, t2 = t[:n], t[n:]
        if m.method == "byol":
            p = self.predictor(out)
            return obj.symmetrized(obj.byol_loss, (p[:n], p[n:]), (t1, t2))
        if m.method == "mocov3":
            q = self.predictor(out)
            return obj.symmetrized(obj.moco_v3_loss, (q[:n], q[n:]), (t1, t2), temperature=m.temperature)
        loss = obj.dino_loss([o1, o2], [t1, t2], self.center, m.dino_student_temp, m.dino_teacher_temp)
        if update_state:
            self.center = obj.dino_center_update(self.center, t.mean(dim=0))
        return loss

    def after_step(self) -> None:
        if self.momentum is not None:
            online = dict(self.online.named_parameters())
            self.momentum = obj.ema_update(self.momentum, online, self.method.ema_momentum)

    def checkpoint_modules(self) -> dict[str, nn.Module]:
        mods: dict[str, nn.Module] = {"head": self.online.head}
        if self.predictor is not None:
            mods["predictor"] = self.predictor
        return mods


def _adamw(params, lr: float, method: SSLMethodConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=method.betas, weight_decay=method.weight_decay)


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss ({loss.item()}) at {where}")


@dataclass
class PretrainResult:
    checkpoint: dict
    curve: LossCurve
    model: SSLModel
    best_epoch: int


def pretrain_ssl(
    method: SSLMethodConfig,
    spec: EncoderSpec,
    train: DatasetManifest,
    hp: TrainingHyperparams,
    view_aug: AugmentationConfig,
    val: Optional[DatasetManifest] = None,
    balance_aug: Optional[AugmentationConfig] = None,
    proj_hidden: int = 512,
    proj_dim: int = 128,
    epochs: Optional[int] = None,
    metadata: Optional[dict] = None,
    on_checkpoint=None,
) -> PretrainResult:
    """Optimize encoder and heads against the method's objective.

    A checkpoint is taken whenever the validation objective (fixed views,
    eval-mode network) improves; without a validation manifest the final
    epoch is kept. ``on_checkpoint(ckpt)`` is called each time one is taken.
    """
    if len(train) == 0:
        raise ValueError("training manifest is empty")
    epochs = hp.epochs_ssl if epochs is None else epochs
    balance_aug = balance_aug or AugmentationConfig()
    torch.manual_seed(hp.seed)
    model = SSLModel(method, spec, proj_hidden, proj_dim)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = _adamw(params, method.lr_ssl, method)

    cache = ImageCache(spec.input_resolution)
    kw = dict(cache=cache, balance_aug=balance_aug, mean=hp.normalize_mean, std=hp.normalize_std)
    train_ds = TwoViewDataset(train, view_aug=view_aug, **kw)
    val_ds = TwoViewDataset(val, view_aug=view_aug, fixed_views=True, **kw) if val is not None and len(val) else None

    meta = {"method": method.method, "seed": hp.seed, "taxonomy": list(train.taxonomy.classes),
            "phase": "pretrain", **(metadata or {})}
    curve = LossCurve()
    best, best_epoch, ckpt = float("inf"), 0, None
    for epoch in range(epochs):
        model.train()
        total, count = 0.0, 0
        for step, (v1, v2) in enumerate(_loader(train_ds, hp.batch_size, hp.seed, epoch, True, hp.workers, True)):
            loss = model.loss(v1, v2)
            _check_finite(loss, f"{method.method} pretraining epoch {epoch + 1} step {step + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.after_step()
            total += loss.item() * v1.shape[0]
            count += v1.shape[0]
        train_loss = total / count
        val_loss = _ssl_val_loss(model, val_ds, hp) if val_ds is not None else None
        if val_loss is not None and not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation objective at epoch {epoch + 1}")
        curve.append(train_loss, val_loss)
        logger.info("pretrain %s epoch %d train %.4f val %s", method.method, epoch + 1, train_loss, val_loss)
        if val_loss is not None and val_loss < best:
            best, best_epoch = val_loss, epoch + 1
            ckpt = make_checkpoint(model.encoder, model.checkpoint_modules(), {**meta, "epoch": epoch + 1})
            if on_checkpoint is not None:
                on_checkpoint(ckpt)
    if ckpt is None:
        best_epoch = epochs
        ckpt = make_checkpoint(model.encoder, model.checkpoint_modules(), {**meta, "epoch": epochs})
        if on_checkpoint is not None:
            on_checkpoint(ckpt)
    return PretrainResult(ckpt, curve, model, best_epoch)


@torch.no_grad()
def _ssl_val_loss(model: SSLModel, ds: TwoViewDataset, hp: TrainingHyperparams) -> float:
    model.eval()
    total, count = 0.0, 0
    for v1, v2 in _loader(ds, hp.batch_size, hp.seed, 0, False):
        if v1.shape[0] < 2 and model.method.method == "mocov3":
            continue
        loss = model.loss(v1, v2, update_state=False)
        total += loss.item() * v1.shape[0]
        count += v1.shape[0]
    model.train()
    return total / max(count, 1)


# --------------------------------------------------------------------------
# supervised phases


def _check_taxonomy(ckpt: Optional[dict], taxonomy: ClassTaxonomy) -> None:
    if ckpt is None:
        return
    classes = ckpt.get("metadata", {}).get("taxonomy")
    if classes is not None and tuple(classes) != taxonomy.classes:
        raise TaxonomyMismatchError("checkpoint taxonomy differs from the manifest taxonomy")


def _encoder_for(ckpt: Optional[dict], spec: Optional[EncoderSpec], seed: int) -> Encoder:
    if ckpt is not None:
        return encoder_from_checkpoint(ckpt)
    if spec is None:
        raise ValueError("need a checkpoint or an encoder spec for random initialization")
    torch.manual_seed(seed)
    return Encoder(spec)


@torch.no_grad()
def extract_features(encoder: Encoder, manifest: DatasetManifest, hp: TrainingHyperparams,
                     balance_aug: Optional[AugmentationConfig] = None) -> tuple[torch.Tensor, torch.Tensor]:
    was_training = encoder.training
    encoder.eval()
    ds = SupervisedDataset(manifest, ImageCache(encoder.spec.input_resolution), balance_aug or AugmentationConfig(),
                           hp.normalize_mean, hp.normalize_std)
    feats, labels = [], []
    for x, y in _loader(ds, max(hp.batch_size, 64), hp.seed, 0, False, hp.workers):
        feats.append(encoder(x))
        labels.append(y)
    encoder.train(was_training)
    return torch.cat(feats), torch.cat(labels)


@dataclass
class ProbeResult:
    head: ClassifierHead
    report: MetricsReport
    curve: LossCurve
    encoder_checksum: str


def linear_probe(
    checkpoint: Optional[dict],
    train: DatasetManifest,
    val: DatasetManifest,
    hp: TrainingHyperparams,
    method: SSLMethodConfig,
    spec: Optional[EncoderSpec] = None,
    balance_aug: Optional[AugmentationConfig] = None,
    epochs: Optional[int] = None,
) -> ProbeResult:
    """Train a linear classifier on frozen encoder features.

    ``checkpoint=None`` probes a freshly initialized encoder built from
    ``spec`` (the random-init baseline). Normalization statistics stay
    frozen and the encoder checksum is verified after training.
    """
    if checkpoint is not None:
        checkpoint = load_checkpoint(checkpoint)
    _check_taxonomy(checkpoint, train.taxonomy)
    if val.taxonomy != train.taxonomy:
        raise TaxonomyMismatchError("train and validation manifests use different taxonomies")
    epochs = hp.epochs_linear if epochs is None else epochs
    encoder = _encoder_for(checkpoint, spec, hp.seed)
    for p in encoder.parameters():
        p.requires_grad_(False)
    before = parameter_checksum(encoder)

    x_tr, y_tr = extract_features(encoder, train, hp, balance_aug)
    x_va, y_va = extract_features(encoder, val, hp, balance_aug)

    torch.manual_seed(hp.seed)
    head = ClassifierHead(ClassifierHeadSpec(encoder.feature_dim, len(train.taxonomy)))
    opt = _adamw(head.parameters(), method.lr_probe, method)
    gen = torch.Generator().manual_seed(derive_seed("probe", hp.seed) % (2**63))
    curve = LossCurve()
    for epoch in range(epochs):
        order = torch.randperm(len(x_tr), generator=gen)
        total = 0.0
        for i in range(0, len(order), hp.batch_size):
            idx = order[i:i + hp.batch_size]
            loss = F.cross_entropy(head(x_tr[idx]), y_tr[idx])
            _check_finite(loss, f"linear probe epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        with torch.no_grad():
            val_loss = F.cross_entropy(head(x_va), y_va).item()
        curve.append(total / len(x_tr), val_loss)

    after = parameter_checksum(encoder)
    if after != before:
        raise RuntimeError("encoder parameters changed during linear probing")
    with torch.no_grad():
        pred = head(x_va).argmax(dim=1)
    report = compute_metrics(pred.numpy(), y_va.numpy(), val.taxonomy, phase="linear")
    report.loss_curve = curve.to_dict()
    return ProbeResult(head, report, curve, after)


@dataclass
class FineTuneResult:
    model: Classifier
    report: MetricsReport
    curve: LossCurve
    best_epoch: int
    stopped_epoch: int


@torch.no_grad()
def _eval_loss_and_preds(model: nn.Module, ds: SupervisedDataset, hp: TrainingHyperparams):
    model.eval()
    total, preds, labels = 0.0, [], []
    for x, y in _loader(ds, max(hp.batch_size, 64), hp.seed, 0, False, hp.workers):
        logits = model(x)
        total += F.cross_entropy(logits, y, reduction="sum").item()
        preds.append(logits.argmax(dim=1))
        labels.append(y)
    return total / len(ds), torch.cat(preds).numpy(), torch.cat(labels).numpy()


def fit_supervised(
    model: Classifier,
    train: DatasetManifest,
    val: DatasetManifest,
    hp: TrainingHyperparams,
    lr: float,
    method: SSLMethodConfig,
    train_aug: Optional[AugmentationConfig],
    balance_aug: Optional[AugmentationConfig] = None,
    epochs: Optional[int] = None,
) -> tuple[LossCurve, int, int]:
    """Train all parameters with early stopping; restores the best-epoch weights in place.

    Returns the loss curve, the best epoch and the epoch training stopped at (1-based).
    """
    epochs = hp.epochs_finetune if epochs is None else epochs
    balance_aug = balance_aug or AugmentationConfig()
    cache = ImageCache(model.encoder.spec.input_resolution)
    train_ds = SupervisedDataset(train, cache, balance_aug, hp.normalize_mean, hp.normalize_std, train_aug=train_aug)
    val_ds = SupervisedDataset(val, cache, balance_aug, hp.normalize_mean, hp.normalize_std)
    opt = _adamw(model.parameters(), lr, method)
    state = EarlyStopState()
    curve = LossCurve()
    stopped = epochs
    for epoch in range(epochs):
        model.train()
        total = 0.0
        for step, (x, y) in enumerate(_loader(train_ds, hp.batch_size, hp.seed, epoch, True, hp.workers)):
            loss = F.cross_entropy(model(x), y)
            _check_finite(loss, f"fine-tuning epoch {epoch + 1} step {step + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
        val_loss, _, _ = _eval_loss_and_preds(model, val_ds, hp)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at fine-tuning epoch {epoch + 1}")
        curve.append(total / len(train_ds), val_loss)
        snapshot = None
        if val_loss <= state.best_loss - hp.min_delta:
            snapshot = copy.deepcopy(model.state_dict())
        state, decision = early_stop_step(state, val_loss, hp.patience, epoch + 1, snapshot, hp.min_delta)
        logger.info("finetune epoch %d train %.4f val %.4f", epoch + 1, curve.train[-1], val_loss)
        if decision == "stop":
            stopped = epoch + 1
            break
    if state.best_checkpoint is not None:
        model.load_state_dict(state.best_checkpoint)
    return curve, state.best_epoch, stopped


def fine_tune(
    checkpoint: Optional[dict],
    train: DatasetManifest,
    val: DatasetManifest,
    hp: TrainingHyperparams,
    method: SSLMethodConfig,
    train_aug: Optional[AugmentationConfig] = None,
    spec: Optional[EncoderSpec] = None,
    balance_aug: Optional[AugmentationConfig] = None,
    epochs: Optional[int] = None,
) -> FineTuneResult:
    """Supervised training of encoder and classifier from a checkpoint (or random init)."""
    if checkpoint is not None:
        checkpoint = load_checkpoint(checkpoint)
    _check_taxonomy(checkpoint, train.taxonomy)
    encoder = _encoder_for(checkpoint, spec, hp.seed)
    torch.manual_seed(hp.seed)
    model = Classifier(encoder, ClassifierHead(ClassifierHeadSpec(encoder.feature_dim, len(train.taxonomy))))
    curve, best_epoch, stopped = fit_supervised(
        model, train, val, hp, method.lr_finetune, method, train_aug, balance_aug, epochs
    )
    report = evaluate(model, val, hp, balance_aug, phase="finetune")
    report.loss_curve = curve.to_dict()
    report.extra["best_epoch"] = best_epoch
    report.extra["stopped_epoch"] = stopped
    return FineTuneResult(model, report, curve, best_epoch, stopped)


def evaluate(model: Classifier, manifest: DatasetManifest, hp: TrainingHyperparams,
             balance_aug: Optional[AugmentationConfig] = None, phase: str = "test") -> MetricsReport:
    ds = SupervisedDataset(manifest, ImageCache(model.encoder.spec.input_resolution),
                           balance_aug or AugmentationConfig(), hp.normalize_mean, hp.normalize_std)
    loss, preds, labels = _eval_loss_and_preds(model, ds, hp)
    report = compute_metrics(preds, labels, manifest.taxonomy, phase=phase)
    report.extra["loss"] = loss
    return report


def classifier_checkpoint(model: Classifier, metadata: Optional[dict] = None) -> dict:
    return make_checkpoint(model.encoder, {"classifier": model.head}, metadata)
