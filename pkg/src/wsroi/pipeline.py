"""Stage functions behind the command line: synth, classifier, pseudo labels, extractor, evaluation."""
from __future__ import annotations

import csv
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from . import cam, classifier, extractor, metrics
from .config import RunConfig, stage_seed
from .data import (
    FOREGROUND,
    Dataset,
    dataset_root_exists,
    load_dataset,
    load_mask,
    save_dataset,
    save_image,
    save_mask,
    split_dataset,
    synthesize_dataset,
)

log = logging.getLogger(__name__)

CHECKPOINTS, PSEUDO, PRED, REPORTS, PLOTS = "checkpoints", "pseudo", "pred", "reports", "plots"
SCALARS = ("ac", "auc", "precision", "recall", "f_measure")


class StageError(RuntimeError):
    """A required upstream artifact is missing."""


def out_dir(cfg: RunConfig, sub: str = "") -> Path:
    p = Path(cfg.out) / sub
    p.mkdir(parents=True, exist_ok=True)
    return p


def variant_name(train_cfg: extractor.ExtractorTrainConfig) -> str:
    if not train_cfg.contrastive_enabled:
        return "no-contrast"
    return "-".join(train_cfg.contrastive_taps)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        w.writerows({c: r[c] for c in columns} for r in rows)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path}; run the `{stage}` stage first")
    return path


def _dataset(cfg: RunConfig, split: str) -> Dataset:
    if not cfg.data.root:
        raise StageError("no dataset root configured (--data); create one with `synth`")
    return load_dataset(cfg.data.root, split, size=(cfg.data.size, cfg.data.size), seed=cfg.seed)


# ---------------------------------------------------------------- stages


def run_synth(cfg: RunConfig, target, force: bool = False) -> tuple[Dataset, Dataset]:
    target = Path(target)
    if dataset_root_exists(target):
        if not force:
            raise FileExistsError(f"{target} is not empty; pass --force to overwrite")
        for split in ("train", "test"):
            shutil.rmtree(target / split, ignore_errors=True)
    size = (cfg.data.size, cfg.data.size)
    full = synthesize_dataset(cfg.seed, cfg.data.synth_n, size, cfg.data.synth)
    train, test = split_dataset(full, cfg.data.split_ratio, stage_seed(cfg.seed, "split"))
    save_dataset(train, target)
    save_dataset(test, target)
    cfg.save(target / "config_synth.yaml")
    log.info("synthesised %d train / %d test samples into %s", len(train), len(test), target)
    return train, test


def run_train_classifier(cfg: RunConfig):
    ds = _dataset(cfg, "train")
    cfg.save(out_dir(cfg) / "config_train-classifier.yaml")
    model = classifier.build_classifier(cfg.classifier)
    model, hist = classifier.train_classifier(model, ds, cfg.classifier_train)
    acc = classifier.accuracy(model, ds)
    classifier.save_classifier(model, out_dir(cfg, CHECKPOINTS) / "classifier.pt",
                               {"seed": cfg.seed, "train_config": vars(cfg.classifier_train)})
    write_csv(out_dir(cfg, REPORTS) / "classifier_loss.csv", ("epoch", "loss"),
              [{"epoch": e, "loss": l} for e, l in enumerate(hist.loss)])
    summary = {"train_accuracy": acc, "n_train": len(ds), "class_counts": ds.class_counts(),
               "skipped": list(ds.skipped)}
    (out_dir(cfg, REPORTS) / "classifier_summary.json").write_text(json.dumps(summary, indent=2))
    log.info("classifier train accuracy %.3f", acc)
    return model, hist, acc


def _load_trained_classifier(cfg: RunConfig):
    path = _require(Path(cfg.out) / CHECKPOINTS / "classifier.pt", "train-classifier")
    model, _ = classifier.load_classifier(path)
    return model


def run_gen_pseudo(cfg: RunConfig, heatmaps: bool = False, split: str = "train"):
    model = _load_trained_classifier(cfg)
    ds = _dataset(cfg, split)
    cfg.save(out_dir(cfg) / "config_gen-pseudo.yaml")
    labels = cam.generate_pseudo_labels(model, ds, cfg.pseudo_threshold)
    pseudo_dir = out_dir(cfg, PSEUDO)
    for sid, pl in labels.items():
        save_mask(pl.mask, pseudo_dir / f"{sid}.png")
    if heatmaps:
        _write_heatmaps(model, ds, out_dir(cfg, PLOTS) / "heatmaps")
    summary = pseudo_label_quality(ds, labels)
    (out_dir(cfg, REPORTS) / "pseudo_labels.json").write_text(json.dumps(summary, indent=2))
    return labels, summary


def pseudo_label_quality(ds: Dataset, labels: dict) -> dict:
    fg = [s for s in ds if s.class_label == FOREGROUND and s.gt_mask is not None]
    if not fg:
        return {"n_foreground": 0}
    preds = [np.asarray(getattr(labels[s.id], "mask", labels[s.id])) for s in fg]
    gts = [s.gt_mask for s in fg]
    c = sum((metrics.confusion_counts(p, g) for p, g in zip(preds, gts)), metrics.ConfusionCounts())
    return {"n_foreground": len(fg), "mean_f_measure": metrics.mean_f_measure(preds, gts),
            "pooled_precision": metrics.precision(c), "pooled_recall": metrics.recall(c)}


def _write_heatmaps(model, ds: Dataset, target: Path):
    import matplotlib

    matplotlib.use("Agg")
    target.mkdir(parents=True, exist_ok=True)
    jet = matplotlib.colormaps["jet"]
    for s in ds:
        if s.class_label != FOREGROUND:
            continue
        maps = cam.layer_maps(model, s.image, s.class_index)
        for name, m in zip(("tap1", "tap2", "tap3", "merged"), maps + [cam.merge_maps(maps)]):
            save_image(jet(m)[..., :3], target / f"{s.id}_{name}.png")


def load_pseudo_labels(cfg: RunConfig, ds: Dataset) -> dict:
    pseudo_dir = _require(Path(cfg.out) / PSEUDO, "gen-pseudo")
    missing = [s.id for s in ds if not (pseudo_dir / f"{s.id}.png").exists()]
    if missing:
        raise StageError(f"missing pseudo labels for {', '.join(missing)}; run the `gen-pseudo` stage first")
    return {s.id: load_mask(pseudo_dir / f"{s.id}.png") for s in ds}


def run_train_extractor(cfg: RunConfig):
    ds = _dataset(cfg, "train")
    labels = load_pseudo_labels(cfg, ds)
    variant = variant_name(cfg.extractor_train)
    cfg.save(out_dir(cfg) / f"config_train-extractor_{variant}.yaml")
    model = extractor.build_unet(cfg.extractor)
    model, hist = extractor.train_extractor(model, ds, labels, cfg.extractor_train)
    extractor.save_extractor(model, out_dir(cfg, CHECKPOINTS) / f"extractor_{variant}.pt",
                             cfg.extractor_train, {"seed": cfg.seed})
    write_csv(out_dir(cfg, REPORTS) / f"extractor_{variant}_log.csv", extractor.CSV_COLUMNS, hist.rows)
    return model, hist


def run_evaluate(cfg: RunConfig, split: str = "test") -> metrics.MetricReport:
    variant = variant_name(cfg.extractor_train)
    path = _require(Path(cfg.out) / CHECKPOINTS / f"extractor_{variant}.pt", "train-extractor")
    model, _ = extractor.load_extractor(path)
    ds = _dataset(cfg, split)
    missing = [s.id for s in ds if s.gt_mask is None]
    if missing:
        raise ValueError(f"ground-truth masks missing for {', '.join(missing)}")
    cfg.save(out_dir(cfg) / f"config_evaluate_{variant}_{split}.yaml")
    probs = extractor.foreground_probability(model, ds.images())
    pred_dir = out_dir(cfg, f"{PRED}/{variant}/{split}")
    masks = []
    for s, p in zip(ds, probs):
        np.save(pred_dir / f"{s.id}_score.npy", p)
        mask = (p >= 0.5).astype(np.uint8)
        masks.append(mask)
        save_mask(mask, pred_dir / f"{s.id}.png")
    report = metrics.evaluate_maps(list(probs), [s.gt_mask for s in ds], [s.id for s in ds])
    fg = [i for i, s in enumerate(ds) if s.class_label == FOREGROUND]
    report.curve_max["argmax_mean_f_measure_foreground"] = metrics.mean_f_measure(
        [masks[i] for i in fg], [ds[i].gt_mask for i in fg])
    report.save(out_dir(cfg, REPORTS) / f"report_{variant}_{split}.json")
    log.info("%s/%s: %s", variant, split, {k: round(v, 4) for k, v in report.scalars().items()})
    return report


def run_plot(cfg: RunConfig) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = sorted((Path(cfg.out) / REPORTS).glob("report_*.json"))
    if not reports:
        raise StageError("no reports found; run the `evaluate` stage first")
    written = []
    for kind, xlabel, ylabel in (("pr", "Recall", "Precision"), ("roc", "False positive rate", "True positive rate")):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for rp in reports:
            curve = json.loads(rp.read_text())["curves"][kind]
            ax.plot(curve["x"], curve["y"], label=rp.stem.removeprefix("report_"))
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        path = out_dir(cfg, PLOTS) / f"{kind}_curves.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
