"""Training loop: masking, calibration, backbone, rebalanced updates,
unimodal heads, evaluation and run records."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backbone as bb
from . import fcm as fcm_mod
from . import grm
from .autograd import NumericalError, Tensor, backward, sgd_step, softmax_cross_entropy
from .data import Dataset, batch_iter
from .masking import MaskSet, generate_masks, validate_rates, write_masks
from .metrics import accuracy, weighted_f1
from .model import ModelState

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class Ablations:
    fcm_on: bool = True
    grm_distribution_on: bool = True
    grm_spatial_on: bool = True

    @classmethod
    def plain(cls) -> "Ablations":
        return cls(False, False, False)


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    missing_rates: tuple[float, ...] = (0.3, 0.5, 0.7)
    seed: int = 0
    loss_reduction: str = "mean"
    grm: grm.GrmConfig = field(default_factory=grm.GrmConfig)
    fcm: fcm_mod.FcmConfig = field(default_factory=fcm_mod.FcmConfig)
    model: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("train.lr must be positive")
        if self.epochs < 1:
            raise ValueError("train.epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be positive")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("train.loss_reduction must be 'mean' or 'sum'")
        self.missing_rates = tuple(float(r) for r in validate_rates(self.missing_rates))


class TrainingAborted(RuntimeError):
    """A committed loss or gradient went non-finite."""


def diagnostics_columns(names: Sequence[str]) -> list[str]:
    cols = ["t"]
    for key in ("D_KL", "delta", "mu", "cos"):
        cols += [f"{key}_{n}" for n in names]
    return cols + ["L_task", "L_mod", "equilibrium_gap"]


def split_seed(seed: int, split: str) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split)]).generate_state(1)[0])


def make_masks(config: TrainConfig, datasets: dict[str, Dataset]) -> dict[str, MaskSet]:
    """One fixed mask set per split, generated independently."""
    return {
        s: generate_masks(config.missing_rates, len(d), split_seed(config.seed, s))
        for s, d in datasets.items()
    }


class BalmModel:
    """Backbone (+ optional calibration group) and monitoring unimodal heads."""

    def __init__(self, dims: Sequence[int], num_classes: int, config: TrainConfig):
        self.dims = tuple(dims)
        self.M = len(dims)
        self.num_classes = num_classes
        self.config = config
        self.backbone = bb.init_backbone(dims, num_classes, config.model, config.seed)
        if config.ablations.fcm_on:
            d_global = config.fcm.resolve_d_global(dims)
            self.backbone.add_group("fcm", fcm_mod.init_fcm_params(dims, d_global, config.seed))
        self.heads = grm.init_unimodal_heads(
            self.M, config.model.d_emb, config.model.d_h, num_classes, config.seed
        )
        self.frozen_descriptors: list[np.ndarray] | None = None

    def freeze_descriptors(self, dataset: Dataset, masks: MaskSet) -> None:
        from .masking import apply_masks

        masked = apply_masks(dataset.features, masks)
        self.frozen_descriptors = [
            fcm_mod.global_descriptor(x, masks.masks[:, m], self.config.fcm.epsilon).data
            for m, x in enumerate(masked)
        ]

    def calibrated(self, batch) -> list[Tensor]:
        if "fcm" not in self.backbone:
            return [Tensor(x) for x in batch.features]
        desc = None
        if self.config.fcm.descriptor_scope == "frozen" and self.frozen_descriptors is not None:
            desc = [Tensor(d) for d in self.frozen_descriptors]
        return fcm_mod.calibrate(batch.features, batch.mask, self.backbone["fcm"],
                                 self.config.fcm, descriptors=desc)

    def forward(self, batch):
        """Return ``(prediction, embeddings)`` for a masked batch."""
        z = bb.encode(self.calibrated(batch), self.backbone)
        h = bb.fuse(z, self.backbone, self.config.model.variant)
        return bb.predict(h, self.backbone), z

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.backbone.state_dict(), **self.heads.state_dict()}

    def load_state_dict(self, state) -> None:
        names = dict(self.backbone.named_tensors())
        self.backbone.load_state_dict({k: v for k, v in state.items() if k in names})
        self.heads.load_state_dict({k: v for k, v in state.items() if k not in names})


@dataclass
class StepResult:
    loss_task: float
    loss_mod: float
    kl: np.ndarray
    cos: np.ndarray
    gap: float
    correct: int


def train_step(model: BalmModel, batch, state: grm.ModulationState, iteration: int):
    """One iteration of the rebalanced update; returns ``(new_state, StepResult)``."""
    cfg = model.config
    ab = cfg.ablations
    labels = batch.labels
    model.backbone.zero_grad()
    model.heads.zero_grad()
    try:
        pred, z = model.forward(batch)
        loss_task = bb.task_loss(pred, labels, cfg.loss_reduction)
        uni = grm.unimodal_forward(z, model.heads, detach=cfg.grm.detach_unimodal)

        # head-weight gradients; the main one stays live for the alignment loss
        g_main = grm.head_gradient_closed_form(pred.hidden, pred.probs, labels)
        g_uni = [grm.head_gradient_closed_form(u.hidden.detach(), u.probs.detach(), labels) for u in uni]

        loss = loss_task
        loss_mod_value = 0.0
        if ab.grm_spatial_on and cfg.grm.mod_loss_mode == "current":
            loss_mod, _ = grm.spatial_alignment_loss(g_main, g_uni, state.mu)
            loss_mod_value = loss_mod.item()
            if cfg.grm.tau > 0:
                loss = loss_task + cfg.grm.tau * loss_mod
        elif ab.grm_spatial_on:
            # carried value is a detached scalar: reported, no gradient
            loss_mod_value = state.carried_mod_loss
            loss = loss_task + cfg.grm.tau * loss_mod_value

        backward(loss)
        uni_losses = []
        for u in uni:
            lu, _ = softmax_cross_entropy(u.logits, labels, reduction=cfg.loss_reduction)
            backward(lu)
            uni_losses.append(lu)
    except NumericalError as exc:
        raise TrainingAborted(
            f"non-finite value at iteration {iteration} in batch starting {batch.ids[:1]}: {exc}"
        ) from exc

    mu_step = state.mu if ab.grm_distribution_on else np.ones(model.M)
    enc_grads = grm.encoder_gradients(model.backbone, model.M)
    gap = grm.equilibrium_gap(enc_grads, mu_step)
    grm.modulated_encoder_step(model.backbone, mu_step, cfg.lr)
    for m in range(model.M):
        sgd_step(model.heads.tensors(grm.unimodal_group(m)), cfg.lr)

    kl = np.array([grm.kl_to_reference(u, pred) for u in uni])
    new_state = grm.update_progress(state, kl)
    mu = grm.modulation_coefficients(new_state.delta_kl, cfg.grm.rho, cfg.grm.delta_floor)
    cos = np.array([
        grm.cosine_similarity(g, g_main.detach()).item() for g in g_uni
    ])
    carried = float(np.sum(np.abs(cos * mu))) if cfg.grm.mod_loss_mode == "lagged" else loss_mod_value
    new_state = replace(new_state, mu=mu, carried_mod_loss=carried)
    correct = int(np.sum(pred.labels() == labels))
    return new_state, StepResult(loss_task.item(), loss_mod_value, kl, cos, gap, correct)


def predict_dataset(model: BalmModel, dataset: Dataset, masks: MaskSet, batch_size: int):
    """Forward-only pass; returns ``(predicted labels, mean loss)``."""
    preds, total = [], 0.0
    for batch in batch_iter(dataset, masks, batch_size, shuffle=False):
        pred, _ = model.forward(batch)
        loss, _ = softmax_cross_entropy(pred.logits, batch.labels, reduction="sum")
        total += loss.item()
        preds.append(pred.labels())
    return np.concatenate(preds), total / len(dataset)


def evaluate(model: BalmModel, dataset: Dataset, masks: MaskSet, batch_size: int) -> dict:
    labels, loss = predict_dataset(model, dataset, masks, batch_size)
    return {
        "acc": accuracy(labels, dataset.labels),
        "wf1": weighted_f1(labels, dataset.labels, dataset.num_classes),
        "loss": loss,
    }


@dataclass
class RunRecord:
    config: dict
    modalities: list[str]
    epochs: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    test: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    early_exit: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def diagnostics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=diagnostics_columns(self.modalities), lineterminator="\n")
        writer.writeheader()
        for row in self.diagnostics:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def train(config: TrainConfig, datasets, out_dir=None, masks: dict[str, MaskSet] | None = None,
          config_snapshot: dict | None = None):
    """Run the full procedure and return ``(RunRecord, BalmModel)``.

    ``datasets`` is a ``(train, val, test)`` triple or a dict keyed by split.
    The returned model holds the parameters of the selected epoch.  When
    ``out_dir`` is given the run directory is populated.
    """
    if not isinstance(datasets, dict):
        datasets = dict(zip(SPLITS, datasets))
    train_set = datasets["train"]
    names = list(train_set.modalities)
    if len(config.missing_rates) != len(names):
        raise ValueError(f"{len(config.missing_rates)} missing rates for {len(names)} modalities")
    masks = masks if masks is not None else make_masks(config, datasets)
    model = BalmModel(train_set.dims, train_set.num_classes, config)
    if config.fcm.descriptor_scope == "frozen" and config.ablations.fcm_on:
        model.freeze_descriptors(train_set, masks["train"])

    record = RunRecord(config=config_snapshot or config_to_flat(config), modalities=names)
    state = grm.ModulationState.initial(model.M)
    best = (-np.inf, 0, None)
    iteration = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for s in datasets:
            fname = f"masks_{s}.jsonl"
            write_masks(out / fname, masks[s], datasets[s].ids)
            record.masks[s] = fname

    for epoch in range(1, config.epochs + 1):
        shuffle_seed = int(np.random.SeedSequence([config.seed, 7, epoch]).generate_state(1)[0])
        steps = []
        for batch in batch_iter(train_set, masks["train"], config.batch_size, shuffle_seed, shuffle=True):
            try:
                state, res = train_step(model, batch, state, iteration)
            except TrainingAborted as exc:
                record.early_exit = str(exc)
                if out is not None:
                    _dump_batch(out / "aborted_batch.json", batch, iteration)
                    _write_run(out, record)
                raise
            steps.append(res)
            iteration += 1

        row = {"t": state.t}
        for key, values in (("D_KL", [s.kl for s in steps]), ("delta", None),
                            ("mu", None), ("cos", [s.cos for s in steps])):
            if values is None:
                vec = state.delta_kl if key == "delta" else state.mu
            else:
                vec = np.mean(values, axis=0)
            row.update({f"{key}_{n}": float(v) for n, v in zip(names, vec)})
        row["L_task"] = float(np.mean([s.loss_task for s in steps]))
        row["L_mod"] = float(np.mean([s.loss_mod for s in steps]))
        row["equilibrium_gap"] = float(np.mean([s.gap for s in steps]))
        record.diagnostics.append(row)

        tr = evaluate(model, train_set, masks["train"], config.batch_size)
        va = evaluate(model, datasets["val"], masks["val"], config.batch_size)
        record.epochs.append({
            "epoch": epoch,
            "batch_loss": row["L_task"],
            "train_loss": tr["loss"], "train_acc": tr["acc"], "train_wf1": tr["wf1"],
            "val_loss": va["loss"], "val_acc": va["acc"], "val_wf1": va["wf1"],
        })
        log.debug("epoch %d train_acc=%.4f val_wf1=%.4f", epoch, tr["acc"], va["wf1"])
        # strict improvement keeps the earlier epoch on ties
        if va["wf1"] > best[0]:
            best = (va["wf1"], epoch, model.state_dict())

    record.best_epoch = best[1]
    model.load_state_dict(best[2])
    if "test" in datasets:
        record.test = evaluate(model, datasets["test"], masks["test"], config.batch_size)
    if out is not None:
        save_snapshot(out / "model.json", model)
        _write_run(out, record)
    return record, model


def _write_run(out: Path, record: RunRecord) -> None:
    (out / "run.json").write_text(record.to_json() + "\n", encoding="utf-8")
    (out / "diagnostics.csv").write_text(record.diagnostics_csv(), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(record.config, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")


def _dump_batch(path: Path, batch, iteration: int) -> None:
    path.write_text(json.dumps({
        "iteration": iteration,
        "ids": list(batch.ids),
        "labels": batch.labels.tolist(),
        "mask": batch.mask.tolist(),
    }, indent=2), encoding="utf-8")


def save_snapshot(path, model: BalmModel) -> None:
    state = {k: v.tolist() for k, v in sorted(model.state_dict().items())}
    Path(path).write_text(json.dumps(state) + "\n", encoding="utf-8")


def load_snapshot(path, model: BalmModel) -> None:
    state = json.loads(Path(path).read_text(encoding="utf-8"))
    model.load_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in state.items()})


# --------------------------------------------------------------------------
# flat config <-> dataclasses
# --------------------------------------------------------------------------


def config_to_flat(config: TrainConfig) -> dict:
    flat = {
        "train.lr": config.lr,
        "train.epochs": config.epochs,
        "train.batch_size": config.batch_size,
        "train.missing_rates": list(config.missing_rates),
        "train.loss_reduction": config.loss_reduction,
        "seed": config.seed,
    }
    for prefix, obj in (("grm", config.grm), ("fcm", config.fcm), ("model", config.model),
                        ("ablation", config.ablations)):
        for k, v in asdict(obj).items():
            flat[f"{prefix}.{k}"] = v
    return flat


def config_hash(flat: dict) -> str:
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:12]
