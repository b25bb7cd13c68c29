"""Dataset manifests, splits, the labeling-accuracy metric and repeated-trial experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features as feat
from . import graphops, net, segment
from .mesh import DualGraph, MeshError, TriangleMesh, build_dual_graph, load_mesh, read_labels
from .npzio import save_npz
from .synthetic import GENERATORS, LabeledShape

CACHE_VERSION = 1

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metric


def labeling_accuracy(pred, gt, areas) -> dict[str, float]:
    """Area-weighted and face-count fraction of correctly labeled faces."""
    pred, gt, areas = np.asarray(pred), np.asarray(gt), np.asarray(areas, dtype=np.float64)
    if not (len(pred) == len(gt) == len(areas)):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(gt)} labels, {len(areas)} areas")
    hit = pred == gt
    return {
        "area_weighted": float(areas[hit].sum() / areas.sum()),
        "face_count": float(hit.mean()),
    }


# ---------------------------------------------------------------------------
# configuration


@dataclass
class NetConfig:
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    fc_width: int = 1024
    K: int = 8
    dropout: float = 0.5
    batch_norm: bool = True


@dataclass
class RefineConfig:
    lam: float = 1.0
    vote: str = "soft"


@dataclass
class SplitConfig:
    train_fraction: float | None = 0.5
    train: list[str] | None = None
    test: list[str] | None = None
    seed: int = 0


@dataclass
class ShapeEntry:
    name: str
    mesh: str | None = None
    labels: str | None = None
    label_offset: int = 0
    synthetic: dict | None = None  # {"category": ..., "faces": ..., "seed": ...}


@dataclass
class DatasetManifest:
    """Experiment description; see ``docs`` in the README for the JSON layout."""

    shapes: list[ShapeEntry]
    n_labels: int
    split: SplitConfig = field(default_factory=SplitConfig)
    trials: int = 1
    kinds: tuple[str, ...] = feat.KINDS
    features: feat.FeatureConfig = field(default_factory=feat.FeatureConfig)
    network: NetConfig = field(default_factory=NetConfig)
    training: net.TrainConfig = field(default_factory=net.TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    evaluate_train: bool = False
    root: str = "."

    @classmethod
    def from_dict(cls, d: dict, root: str = ".") -> "DatasetManifest":
        d = dict(d)
        shapes = [ShapeEntry(**s) for s in d.pop("shapes")]
        split = SplitConfig(**d.pop("split", {}))
        fc = feat.FeatureConfig(**d.pop("features", {}))
        ncfg = d.pop("network", {})
        if "widths" in ncfg:
            ncfg["widths"] = tuple(ncfg["widths"])
        tcfg = d.pop("training", {})
        if "lr_steps" in tcfg:
            tcfg["lr_steps"] = tuple(tcfg["lr_steps"])
        rcfg = RefineConfig(**d.pop("refine", {}))
        kinds = tuple(d.pop("kinds", feat.KINDS))
        unknown = set(d) - {"n_labels", "trials", "evaluate_train"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(shapes, d["n_labels"], split, d.get("trials", 1), kinds, fc,
                   NetConfig(**ncfg), net.TrainConfig(**tcfg), rcfg,
                   d.get("evaluate_train", False), root)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), root=os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        d["kinds"] = list(self.kinds)
        return d

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def load_shapes(self) -> list[LabeledShape]:
        """Read every entry, checking labels against the mesh and vocabulary."""
        out = []
        for e in self.shapes:
            if e.synthetic is not None:
                cfg = dict(e.synthetic)
                s = GENERATORS[cfg.pop("category")](**cfg)
                mesh, labels = s.mesh, s.labels + e.label_offset
            else:
                mesh = load_mesh(os.path.join(self.root, e.mesh))
                labels = read_labels(os.path.join(self.root, e.labels)) + e.label_offset
            if len(labels) != mesh.n_faces:
                raise MeshError(f"{e.name}: {len(labels)} labels for {mesh.n_faces} faces")
            if labels.min() < 0 or labels.max() >= self.n_labels:
                raise ValueError(f"{e.name}: label outside vocabulary [0, {self.n_labels})")
            out.append(LabeledShape(e.name, mesh, labels, self.n_labels))
        return out


def synthetic_manifest(category: str, count: int, faces: int = 1500, seed: int = 0, **kw) -> DatasetManifest:
    n_labels = GENERATORS[category](faces=64, seed=0).n_labels
    shapes = [
        ShapeEntry(f"{category}_{seed}_{i}", synthetic={"category": category, "faces": faces, "seed": seed * 1000 + i})
        for i in range(count)
    ]
    return DatasetManifest(shapes, n_labels, **kw)


# ---------------------------------------------------------------------------
# splits


def split_dataset(names: list[str], split: SplitConfig, seed: int | None = None) -> tuple[list[int], list[int]]:
    """Seeded shuffle then split by fraction, or explicit name lists."""
    n = len(names)
    if split.train is not None or split.test is not None:
        index = {nm: i for i, nm in enumerate(names)}
        train = [index[x] for x in split.train or []]
        test = [index[x] for x in split.test] if split.test is not None else [i for i in range(n) if i not in set(train)]
    else:
        rng = np.random.default_rng(split.seed if seed is None else seed)
        order = rng.permutation(n).tolist()
        k = int(round(split.train_fraction * n))
        train, test = sorted(order[:k]), sorted(order[k:])
    if not train or not test:
        raise ValueError(f"split leaves {len(train)} training and {len(test)} test shapes")
    if set(train) & set(test):
        raise ValueError("train and test sets overlap")
    return train, test


def nested_splits(n: int, test_fraction: float, train_fractions, seed: int = 0):
    """Fixed held-out set plus growing training sets drawn from the rest.

    ``train_fractions`` are fractions of the whole dataset; each training set
    contains the previous one.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(n).tolist()
    n_test = int(round(test_fraction * n))
    test, pool = sorted(order[:n_test]), order[n_test:]
    out = []
    for f in train_fractions:
        k = int(round(f * n))
        if k < 1 or k > len(pool):
            raise ValueError(f"training fraction {f} needs {k} of {len(pool)} available shapes")
        out.append((sorted(pool[:k]), test))
    return out


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Prepared:
    """Per-shape data independent of any split."""

    shape: LabeledShape
    graph: DualGraph
    raw: dict[str, feat.FeatureMatrix]
    tables: dict[str, graphops.ShapeTables]


def preprocess(shape: LabeledShape, kinds=feat.KINDS, fconfig=feat.FeatureConfig(),
               K: int = 8, pool_layers: int = 5) -> Prepared:
    graph = build_dual_graph(shape.mesh)
    raw = feat.compute_features(shape.mesh, graph, fconfig, kinds)
    nbrs = graph.neighbors()
    tables = {}
    for k in kinds:
        # receptive-field order and coarsening weights use shape-local scaling
        local = feat.normalize_features(raw[k]).values
        tables[k], _ = graphops.prepare_tables(nbrs, graph.edges, local, shape.mesh.areas, K, pool_layers)
    return Prepared(shape, graph, raw, tables)


def preprocess_key(mesh: TriangleMesh, kinds, fconfig, K: int, pool_layers: int) -> str:
    """Content hash of the mesh arrays plus every setting that affects preprocessing."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype=np.int64).tobytes())
    h.update(json.dumps([list(kinds), feat.config_dict(fconfig), K, pool_layers, CACHE_VERSION]).encode())
    return h.hexdigest()[:32]


def save_prepared(path, p: Prepared) -> None:
    """Raw features and tables of one shape in a single ``.npz``."""
    arrays = {"kinds": np.array(json.dumps(sorted(p.raw)))}
    for kind, fm in p.raw.items():
        arrays[f"{kind}/values"] = fm.values
        st = p.tables[kind]
        arrays[f"{kind}/header"] = np.array([st.h, st.K, st.pool_layers], dtype=np.int64)
        arrays[f"{kind}/input_slots"] = st.input_slots
        for i, t in enumerate(st.tables):
            arrays[f"{kind}/table_{i}"] = t
        for i, m in enumerate(st.masks):
            arrays[f"{kind}/mask_{i}"] = m.astype(np.uint8)
    save_npz(path, arrays)


def load_prepared(path, shape: LabeledShape) -> Prepared:
    raw, tables = {}, {}
    with np.load(path) as z:
        for kind in json.loads(str(z["kinds"])):
            raw[kind] = feat.FeatureMatrix(kind, z[f"{kind}/values"])
            h, K, P = (int(x) for x in z[f"{kind}/header"])
            tables[kind] = graphops.ShapeTables(
                h, K, [z[f"{kind}/table_{i}"] for i in range(P)],
                [z[f"{kind}/mask_{i}"].astype(bool) for i in range(P + 1)], z[f"{kind}/input_slots"])
    return Prepared(shape, build_dual_graph(shape.mesh), raw, tables)


def _preprocess_job(args):
    shape, kinds, fconfig, K, pool_layers, cache_dir = args
    if cache_dir is None:
        return preprocess(shape, kinds, fconfig, K, pool_layers)
    path = os.path.join(cache_dir, f"prep-{preprocess_key(shape.mesh, kinds, fconfig, K, pool_layers)}.npz")
    if os.path.exists(path):
        logger.debug("cache hit %s for %s", path, shape.name)
        p = load_prepared(path, shape)
        return Prepared(p.shape, p.graph, {k: p.raw[k] for k in kinds}, {k: p.tables[k] for k in kinds})
    p = preprocess(shape, kinds, fconfig, K, pool_layers)
    tmp = path + f".{os.getpid()}.tmp"
    save_prepared(tmp, p)
    os.replace(tmp, path)
    return p


def preprocess_all(shapes, kinds, fconfig, K, pool_layers, jobs: int = 1, cache_dir=None) -> list[Prepared]:
    """Preprocess every shape, reusing cached results keyed by content hash when ``cache_dir`` is set."""
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
    args = [(s, tuple(kinds), fconfig, K, pool_layers, cache_dir) for s in shapes]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_preprocess_job, args))
    return [_preprocess_job(a) for a in args]


def network_spec(cfg: NetConfig, n_labels: int, in_channels: int) -> net.NetworkSpec:
    return net.NetworkSpec(n_labels, in_channels, tuple(cfg.widths), cfg.fc_width, cfg.K, cfg.dropout, cfg.batch_norm)


def _train_job(args):
    samples, spec, tcfg = args
    return net.train(samples, spec, tcfg)


def train_feature_nets(prepared: list[Prepared], train_idx, manifest: DatasetManifest,
                       seed: int, jobs: int = 1):
    """Train one network per feature kind. Returns ``{kind: (spec, store, stats, losses)}``.

    Feature ``j`` trains with seed ``101 * seed + j``.
    """
    jobs_args, meta = [], []
    for j, kind in enumerate(manifest.kinds):
        stats = feat.channel_stats([prepared[i].raw[kind] for i in train_idx])
        samples = [
            net.TrainingSample(prepared[i].tables[kind],
                               feat.normalize_features(prepared[i].raw[kind], stats).values,
                               prepared[i].shape.labels)
            for i in train_idx
        ]
        spec = network_spec(manifest.network, manifest.n_labels, samples[0].x.shape[1])
        tcfg = net.TrainConfig(**{**asdict(manifest.training), "seed": seed * 101 + j})
        jobs_args.append((samples, spec, tcfg))
        meta.append((kind, spec, stats))
    if jobs > 1:
        with ProcessPoolExecutor(min(jobs, len(jobs_args))) as ex:
            results = list(ex.map(_train_job, jobs_args))
    else:
        results = [_train_job(a) for a in jobs_args]
    return {kind: (spec, r.store, stats, r.losses) for (kind, spec, stats), r in zip(meta, results)}


def evaluate_shape(p: Prepared, nets: dict, refine: RefineConfig) -> dict:
    """Per-feature, voted and refined predictions and their accuracies for one shape."""
    maps = {}
    for kind, (spec, store, stats, _) in nets.items():
        x = feat.normalize_features(p.raw[kind], stats).values
        maps[kind] = net.predict(spec, store, p.tables[kind], x)
    voted = segment.vote_probabilities([maps[k] for k in nets], mode=refine.vote)
    before = voted.argmax(axis=1)
    after = segment.refine(voted, p.graph, refine.lam, p.shape.mesh.bounding_radius())
    gt, areas = p.shape.labels, p.shape.mesh.areas
    row = {
        "name": p.shape.name,
        "faces": int(p.shape.mesh.n_faces),
        "unrefined": labeling_accuracy(before, gt, areas),
        "refined": labeling_accuracy(after, gt, areas),
        "per_feature": {k: labeling_accuracy(m.argmax(axis=1), gt, areas) for k, m in maps.items()},
    }
    return row, after, voted


# ---------------------------------------------------------------------------
# experiments


@dataclass
class AccuracyReport:
    trials: list[dict]
    summary: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {"trials": self.trials, "summary": self.summary}
        if include_timings:
            d["timings"] = self.timings
        return d

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)

    def table(self) -> str:
        """Human-readable summary table."""
        lines = [f"{'trial':>5} {'split':>6} {'shapes':>6} {'before':>8} {'after':>8} " +
                 " ".join(f"{k:>8}" for k in self.summary.get("kinds", []))]
        for t in self.trials:
            for part in ("test", "train"):
                if part not in t:
                    continue
                m = t[part]["mean"]
                feats = " ".join(f"{m['per_feature'][k]:8.4f}" for k in self.summary.get("kinds", []))
                lines.append(f"{t['trial']:>5} {part:>6} {len(t[part]['shapes']):>6} "
                             f"{m['unrefined']:8.4f} {m['refined']:8.4f} {feats}")
        s = self.summary
        if "test_refined_mean" in s:
            lines.append(f"test mean (area-weighted): before {s['test_unrefined_mean']:.4f}, "
                         f"after {s['test_refined_mean']:.4f} +- {s['test_refined_std']:.4f}")
        if "train_refined_mean" in s:
            lines.append(f"train mean (area-weighted): before {s['train_unrefined_mean']:.4f}, "
                         f"after {s['train_refined_mean']:.4f}")
        return "\n".join(lines)


def _mean_rows(rows: list[dict], kinds) -> dict:
    def avg(key, sub="area_weighted"):
        return float(np.mean([r[key][sub] for r in rows]))

    return {
        "unrefined": avg("unrefined"),
        "refined": avg("refined"),
        "unrefined_face": avg("unrefined", "face_count"),
        "refined_face": avg("refined", "face_count"),
        "per_feature": {k: float(np.mean([r["per_feature"][k]["area_weighted"] for r in rows])) for k in kinds},
    }


def run_trial(prepared: list[Prepared], train_idx, test_idx, manifest: DatasetManifest,
              trial: int, jobs: int = 1, keep_labels: bool = False) -> tuple[dict, dict]:
    t0 = time.perf_counter()
    nets = train_feature_nets(prepared, train_idx, manifest, seed=manifest.training.seed + trial, jobs=jobs)
    t1 = time.perf_counter()
    out = {
        "trial": trial,
        "train_shapes": [prepared[i].shape.name for i in train_idx],
        "final_loss": {k: float(v[3][-1]) if v[3] else None for k, v in nets.items()},
    }
    labels = {}
    parts = [("test", test_idx)] + ([("train", train_idx)] if manifest.evaluate_train else [])
    for part, idx in parts:
        rows = []
        for i in idx:
            row, lab, _ = evaluate_shape(prepared[i], nets, manifest.refine)
            rows.append(row)
            labels[prepared[i].shape.name] = lab
        out[part] = {"shapes": rows, "mean": _mean_rows(rows, manifest.kinds)}
    t2 = time.perf_counter()
    timing = {"train_s": t1 - t0, "evaluate_s": t2 - t1}
    if keep_labels:
        out["_labels"] = labels
    return out, timing


def summarize(trials: list[dict], kinds) -> dict:
    s: dict = {"kinds": list(kinds), "n_trials": len(trials)}
    for part in ("test", "train"):
        rows = [t[part]["mean"] for t in trials if part in t]
        if not rows:
            continue
        for key in ("unrefined", "refined", "unrefined_face", "refined_face"):
            vals = [r[key] for r in rows]
            s[f"{part}_{key}_mean"] = float(np.mean(vals))
            s[f"{part}_{key}_std"] = float(np.std(vals))
        s[f"{part}_per_feature_mean"] = {k: float(np.mean([r["per_feature"][k] for r in rows])) for k in kinds}
        s[f"{part}_pairs"] = [[r["unrefined"], r["refined"]] for r in rows]
    return s


def run_experiment(manifest: DatasetManifest, jobs: int = 1, splits=None,
                   prepared: list[Prepared] | None = None, label_sink: dict | None = None,
                   cache_dir=None) -> AccuracyReport:
    """Split, preprocess, train one net per feature, predict, vote, refine, score.

    ``splits`` overrides the manifest's split rule with explicit
    ``[(train_idx, test_idx), ...]``, one per trial. A failing trial is
    recorded with its error and the remaining trials still run.
    """
    t0 = time.perf_counter()
    if prepared is None:
        shapes = manifest.load_shapes()
        prepared = preprocess_all(shapes, manifest.kinds, manifest.features, manifest.network.K,
                                  len(manifest.network.widths), jobs, cache_dir)
    names = [p.shape.name for p in prepared]
    timings = {"preprocess_s": time.perf_counter() - t0, "trials": []}
    trials = []
    n_trials = len(splits) if splits is not None else manifest.trials
    for trial in range(n_trials):
        try:
            if splits is not None:
                train_idx, test_idx = splits[trial]
            else:
                train_idx, test_idx = split_dataset(names, manifest.split, seed=manifest.split.seed + trial)
            row, timing = run_trial(prepared, train_idx, test_idx, manifest, trial, jobs,
                                    keep_labels=label_sink is not None)
            if label_sink is not None:
                label_sink[trial] = row.pop("_labels")
            trials.append(row)
            timings["trials"].append(timing)
        except (ValueError, RuntimeError, MeshError) as exc:
            logger.error("trial %d failed: %s", trial, exc)
            trials.append({"trial": trial, "error": f"{type(exc).__name__}: {exc}"})
    ok = [t for t in trials if "error" not in t]
    timings["total_s"] = time.perf_counter() - t0
    return AccuracyReport(trials, summarize(ok, manifest.kinds), timings)
