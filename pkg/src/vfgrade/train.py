"""Training, evaluation and inference workflows over a manifest."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import center_pad, make_view_pair, view_seed
from .config import RunConfig
from .dataset import GenantGrade, Manifest, load_volume, split_cases
from .metrics import EvalRecord, MetricError, evaluate, within_class_similarity
from .network import EncoderSpec, GradingNetwork
from .objective import lr_at, make_optimizer, set_lr, training_step
from .preprocess import VertebraPatch, preprocess_vertebra
from .sampler import PerClassSampler

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vfgrade-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def load_case_patches(manifest: Manifest, case, cfg: RunConfig) -> list[VertebraPatch]:
    volume = load_volume(manifest.resolve(case.volume_path), "HU")
    mask = load_volume(manifest.resolve(case.mask_path), "labels")
    if volume.shape != mask.shape:
        raise DataError(f"case {case.case_id}: volume {volume.shape} vs mask {mask.shape}")
    return [preprocess_vertebra(volume, mask, v.label, cfg.preprocess, case.case_id, v.grade)
            for v in case.vertebrae]


def prepare_patches(manifest: Manifest, partition: str | None, cfg: RunConfig) -> list[VertebraPatch]:
    cases = manifest.cases if partition is None else manifest.cases_in(partition)
    patches = []
    for case in cases:
        patches.extend(load_case_patches(manifest, case, cfg))
    return patches


def canonical_views(patches, cfg: RunConfig) -> torch.Tensor:
    arr = np.stack([center_pad(p, cfg.augment) for p in patches])
    return torch.from_numpy(arr)


def ensure_split(manifest: Manifest, cfg: RunConfig) -> Manifest:
    if manifest.split is not None:
        return manifest
    seed = cfg.data.split_seed if cfg.data.split_seed is not None else cfg.training.seed
    return split_cases(manifest, cfg.data.test_fraction, seed)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: GradingNetwork, cfg: RunConfig, epoch: int, optimizer=None,
                    sampler: PerClassSampler | None = None, history=None, split=None, step=0) -> None:
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "encoder_spec": model.spec.to_dict(),
        "config": cfg.to_dict(),
        "epoch": epoch,
        "step": step,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "sampler": sampler.state_dict() if sampler is not None else None,
        "torch_rng": torch.get_rng_state(),
        "history": history or [],
        "split": split,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path, expected_spec: EncoderSpec | None = None) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a vfgrade checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {state.get('version')}")
    if expected_spec is not None and state["encoder_spec"] != expected_spec.to_dict():
        raise CheckpointError(f"checkpoint encoder spec {state['encoder_spec']} does not match "
                              f"configured spec {expected_spec.to_dict()}")
    return state


def model_from_checkpoint(state: dict) -> GradingNetwork:
    model = GradingNetwork(EncoderSpec.from_dict(state["encoder_spec"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model


# --- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: GradingNetwork
    history: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    report: dict | None = None
    checkpoint: Path | None = None
    similarity_init: float | None = None
    similarity_final: float | None = None


def _batch_tensors(batch, patches, cfg: RunConfig, epoch: int):
    a, b, labels, ids = [], [], [], []
    for idx, grade in batch:
        p = patches[idx]
        pair = make_view_pair(p, grade, view_seed(cfg.training.seed, epoch, p.source, 0), cfg.augment)
        a.append(pair.view_a)
        b.append(pair.view_b)
        labels.append(grade)
        ids.append(list(p.source))
    return (torch.from_numpy(np.stack(a)), torch.from_numpy(np.stack(b)),
            torch.tensor(labels, dtype=torch.long), ids)


@torch.no_grad()
def embed(model: GradingNetwork, views: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        out = [model.project(model.encode(views[i:i + batch_size]))
               for i in range(0, len(views), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out).numpy()


def records_for(model: GradingNetwork, views: torch.Tensor, grades) -> list[EvalRecord]:
    probs = model.predict_proba(views).double()
    probs = probs / probs.sum(dim=1, keepdim=True)
    return [EvalRecord(int(g), tuple(p.tolist())) for g, p in zip(grades, probs)]


def _test_report(model, views, grades, cfg: RunConfig) -> dict | None:
    if views is None:
        return None
    try:
        return evaluate(records_for(model, views, grades), cfg.metrics.score_mode)
    except MetricError as e:
        log.warning("test metrics unavailable: %s", e)
        return None


def train(cfg: RunConfig, manifest: Manifest, out_dir, resume=None,
          metrics_log=None) -> TrainResult:
    """Per-class sampling -> two augmented views -> SupCon + detached CE, with SGD.

    Writes ``config.yaml``, ``metrics.jsonl``, periodic checkpoints and
    ``final.pt`` under ``out_dir``.
    """
    from .config import dump_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    manifest = ensure_split(manifest, cfg)

    seed_everything(cfg.training.seed)
    spec = cfg.encoder_spec()
    model = GradingNetwork(spec)
    optimizer = make_optimizer(model.parameters(), cfg.optimizer)
    schedule = cfg.schedule()

    train_patches = prepare_patches(manifest, "train", cfg)
    test_patches = prepare_patches(manifest, "test", cfg)
    labels = [int(p.grade) for p in train_patches]
    try:
        sampler = PerClassSampler(labels, cfg.sampler.n, seed=cfg.training.seed)
    except ValueError as e:
        raise DataError(str(e)) from None

    test_views = canonical_views(test_patches, cfg) if test_patches else None
    test_grades = [int(p.grade) for p in test_patches]

    start_epoch, step, history = 0, 0, []
    if resume is not None:
        state = load_checkpoint(resume, spec)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        sampler.load_state_dict(state["sampler"])
        torch.set_rng_state(state["torch_rng"])
        start_epoch, step, history = state["epoch"] + 1, state["step"], list(state["history"])

    result = TrainResult(model)
    if test_views is not None and len(test_grades) > len(set(test_grades)) and resume is None:
        result.similarity_init = within_class_similarity(embed(model, test_views), test_grades)

    log_path = Path(metrics_log) if metrics_log else out / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    best_f1 = max((h.get("macro_f1", -1) for h in history), default=-1)
    with open(log_path, mode) as logf:
        for epoch in range(start_epoch, cfg.training.epochs):
            lr = lr_at(epoch, schedule)
            set_lr(optimizer, lr)
            losses = []
            for batch in sampler.epoch():
                va, vb, y, ids = _batch_tensors(batch, train_patches, cfg, epoch)
                rep = training_step(model, optimizer, va, vb, y, cfg.objective,
                                    step=step, epoch=epoch, batch_ids=ids)
                rec = {"kind": "step", **rep.to_dict()}
                logf.write(json.dumps(rec) + "\n")
                result.steps.append(rec)
                losses.append(rep.total)
                step += 1
            entry = {"kind": "epoch", "epoch": epoch, "lr": lr, "steps": step,
                     "mean_loss": float(np.mean(losses))}
            last = epoch == cfg.training.epochs - 1
            if (epoch + 1) % cfg.training.checkpoint_every == 0 or last:
                rep = _test_report(model, test_views, test_grades, cfg)
                if rep is not None:
                    entry.update({k: rep[k] for k in ("auc_roc", "macro_f1")})
                history.append(entry)
                save_checkpoint(out / f"epoch{epoch + 1:04d}.pt", model, cfg, epoch, optimizer,
                                sampler, history, manifest.split, step)
                if entry.get("macro_f1", -1) > best_f1:
                    best_f1 = entry["macro_f1"]
                    save_checkpoint(out / "best.pt", model, cfg, epoch, optimizer, sampler,
                                    history, manifest.split, step)
            else:
                history.append(entry)
            logf.write(json.dumps(entry) + "\n")
            logf.flush()
            log.info("epoch %d lr %.2e loss %.4f", epoch, lr, entry["mean_loss"])

    final = out / "final.pt"
    save_checkpoint(final, model, cfg, cfg.training.epochs - 1, optimizer, sampler, history,
                    manifest.split, step)
    result.history = history
    result.checkpoint = final
    result.report = _test_report(model, test_views, test_grades, cfg)
    if result.report is not None:
        if len(test_grades) > len(set(test_grades)):
            result.similarity_final = within_class_similarity(embed(model, test_views), test_grades)
        result.report["within_class_similarity"] = {"initial": result.similarity_init,
                                                    "final": result.similarity_final}
        (out / "test_report.json").write_text(json.dumps(result.report, indent=2))
    return result


# --- evaluation / inference ----------------------------------------------------

def evaluate_checkpoint(state: dict, manifest: Manifest, partition: str = "test") -> tuple[dict, list]:
    cfg = RunConfig.from_dict(state["config"])
    if manifest.split is None:
        if state.get("split") is None:
            raise DataError("manifest has no split and checkpoint carries none")
        manifest = Manifest(manifest.cases, state["split"], manifest.base_dir)
    model = model_from_checkpoint(state)
    patches = prepare_patches(manifest, partition, cfg)
    if not patches:
        raise DataError(f"no vertebrae in the {partition} split")
    views = canonical_views(patches, cfg)
    records = records_for(model, views, [int(p.grade) for p in patches])
    report = evaluate(records, cfg.metrics.score_mode)
    report["partition"] = partition
    rows = [{"case_id": p.source[0], "label": p.source[1], "true_grade": int(p.grade),
             "predicted_grade": r.predicted_grade, **{f"p{g}": r.class_probabilities[g] for g in range(4)}}
            for p, r in zip(patches, records)]
    return report, rows


def infer_case(state: dict, volume_path, mask_path) -> list[dict]:
    """Grade every labelled vertebra of one case through encoder + classification head."""
    cfg = RunConfig.from_dict(state["config"])
    model = model_from_checkpoint(state)
    volume = load_volume(volume_path, "HU")
    mask = load_volume(mask_path, "labels")
    labels = sorted(int(v) for v in np.unique(mask.data) if v != 0)
    rows = []
    for label in labels:
        patch = preprocess_vertebra(volume, mask, label, cfg.preprocess)
        views = canonical_views([patch], cfg)
        probs = model.predict_proba(views)[0].double()
        probs = (probs / probs.sum()).tolist()
        rows.append({"label": label, "grade": GenantGrade(int(np.argmax(probs))).name,
                     **{f"p{g}": probs[g] for g in range(4)}})
    return rows
