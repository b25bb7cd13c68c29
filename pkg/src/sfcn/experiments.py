"""Desk-scale experiments on synthetic families: overfit, generalization, trend, determinism."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

from . import evaluate as ev
from . import net
from .mesh import write_labels, write_off


@dataclass
class ExperimentConfig:
    category: str = "dumbbell"
    faces: int = 1500
    epochs: int = 60
    lr: float = net.TrainConfig.lr
    seed: int = 0
    lam: float = 1.0
    jobs: int = 1
    cache_dir: str | None = None


def base_manifest(cfg: ExperimentConfig, count: int, **kw) -> ev.DatasetManifest:
    return ev.synthetic_manifest(
        cfg.category, count, faces=cfg.faces, seed=cfg.seed,
        training=net.TrainConfig(epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed),
        refine=ev.RefineConfig(lam=cfg.lam), **kw,
    )


def overfit(cfg: ExperimentConfig, count: int = 4) -> ev.AccuracyReport:
    """Train on every shape and score the same shapes."""
    m = base_manifest(cfg, count)
    idx = list(range(count))
    return ev.run_experiment(m, jobs=cfg.jobs, splits=[(idx, idx)], cache_dir=cfg.cache_dir)


def generalization(cfg: ExperimentConfig, count: int = 10, n_train: int = 6, trials: int = 3) -> ev.AccuracyReport:
    m = base_manifest(cfg, count, split=ev.SplitConfig(train_fraction=n_train / count, seed=cfg.seed), trials=trials)
    return ev.run_experiment(m, jobs=cfg.jobs, cache_dir=cfg.cache_dir)


def trend(cfg: ExperimentConfig, count: int = 16, test_fraction: float = 0.25,
          fractions=(0.25, 0.5, 0.75)) -> list[tuple[float, ev.AccuracyReport]]:
    """Growing training sets against one fixed held-out set."""
    m = base_manifest(cfg, count)
    prepared = ev.preprocess_all(m.load_shapes(), m.kinds, m.features, m.network.K,
                                 len(m.network.widths), cfg.jobs, cfg.cache_dir)
    out = []
    for f, split in zip(fractions, ev.nested_splits(count, test_fraction, fractions, seed=cfg.seed)):
        out.append((f, ev.run_experiment(m, jobs=cfg.jobs, splits=[split], prepared=prepared)))
    return out


def mixed_manifest(categories, count: int, cfg: ExperimentConfig, **kw) -> ev.DatasetManifest:
    """Several families in one dataset, each with its own block of label ids."""
    shapes, offset = [], 0
    for cat in categories:
        sub = ev.synthetic_manifest(cat, count, faces=cfg.faces, seed=cfg.seed)
        shapes += [replace(e, label_offset=offset) for e in sub.shapes]
        offset += sub.n_labels
    return ev.DatasetManifest(
        shapes, offset,
        training=net.TrainConfig(epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed),
        refine=ev.RefineConfig(lam=cfg.lam), **kw,
    )


def write_dataset(manifest: ev.DatasetManifest, out_dir: str) -> str:
    """Materialize synthetic entries as OFF meshes plus ``.seg`` labels and a file-based manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for entry, shape in zip(manifest.shapes, manifest.load_shapes()):
        write_off(os.path.join(out_dir, f"{entry.name}.off"), shape.mesh)
        write_labels(os.path.join(out_dir, f"{entry.name}.seg"), shape.labels - entry.label_offset)
        entries.append(ev.ShapeEntry(entry.name, f"{entry.name}.off", f"{entry.name}.seg", entry.label_offset))
    path = os.path.join(out_dir, "manifest.json")
    replace(manifest, shapes=entries).save(path)
    return path


def run_pipeline(manifest: ev.DatasetManifest, out_dir: str, jobs: int = 1) -> list[str]:
    """Full pipeline writing refined label files and the report; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    sink: dict = {}
    report = ev.run_experiment(manifest, jobs=jobs, label_sink=sink)
    paths = []
    for trial, labels in sink.items():
        for name, lab in sorted(labels.items()):
            p = os.path.join(out_dir, f"trial{trial}_{name}.seg")
            write_labels(p, lab)
            paths.append(p)
    rp = os.path.join(out_dir, "report.json")
    with open(rp, "w") as fh:
        fh.write(report.to_json() + "\n")
    paths.append(rp)
    return paths


def format_pairs(report: ev.AccuracyReport) -> str:
    """Before/after refinement accuracy per trial, one line each."""
    lines = []
    for t in report.trials:
        if "test" in t:
            m = t["test"]["mean"]
            lines.append(f"trial {t['trial']}: before {m['unrefined']:.4f} after {m['refined']:.4f}")
    return "\n".join(lines)
