"""Command-line entry points: ``sfcn <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 input/output or parse error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import evaluate as ev
from . import features as feat
from . import graphops, net, segment
from .mesh import MeshError, TriangleMesh, build_dual_graph, check_manifold, load_mesh, read_labels, write_labels
from .npzio import save_npz
from .synthetic import LabeledShape

logger = logging.getLogger("sfcn")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

# label i is drawn with PALETTE[i % 12]
PALETTE = (
    (166, 206, 227), (31, 120, 180), (178, 223, 138), (51, 160, 44),
    (251, 154, 153), (227, 26, 28), (253, 191, 111), (255, 127, 0),
    (202, 178, 214), (106, 61, 154), (255, 255, 153), (177, 89, 40),
)


class InputError(Exception):
    """Unreadable or malformed input file."""


def _load_mesh(path: str) -> TriangleMesh:
    try:
        return load_mesh(path)
    except (OSError, MeshError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _load_labels(path: str, n_faces: int) -> np.ndarray:
    try:
        labels = read_labels(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if len(labels) != n_faces:
        raise ValueError(f"{path}: {len(labels)} labels for {n_faces} faces")
    return labels


def _load_manifest(path: str) -> ev.DatasetManifest:
    try:
        return ev.DatasetManifest.load(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    except (TypeError, KeyError) as exc:
        raise ValueError(f"{path}: malformed manifest ({exc})") from exc


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


# ---------------------------------------------------------------------------
# training config files


TRAIN_KEYS = {
    "epochs": int, "lr": float, "momentum": float, "weight_decay": float,
    "lr_gamma": float, "seed": int, "K": int, "fc_width": int, "dropout": float,
}


def parse_train_config(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into typed settings.

    Keys: epochs, lr, momentum, weight_decay, lr_gamma, lr_steps
    (comma-separated fractions), seed, K, widths (comma-separated ints),
    fc_width, dropout, batch_norm (true/false).
    """
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in TRAIN_KEYS:
            out[key] = TRAIN_KEYS[key](value)
        elif key == "widths":
            out[key] = tuple(int(v) for v in value.split(","))
        elif key == "lr_steps":
            out[key] = tuple(float(v) for v in value.split(",") if v.strip())
        elif key == "batch_norm":
            if value.lower() not in ("true", "false"):
                raise ValueError(f"line {n}: batch_norm must be true or false")
            out[key] = value.lower() == "true"
        else:
            raise ValueError(f"line {n}: unknown key {key!r}")
    return out


def format_train_config(settings: dict) -> str:
    lines = []
    for key in sorted(settings):
        v = settings[key]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


_NET_KEYS = {"K", "widths", "fc_width", "dropout", "batch_norm"}


def apply_settings(manifest: ev.DatasetManifest, settings: dict) -> ev.DatasetManifest:
    """Return a copy of ``manifest`` with network/training/refinement/feature overrides applied."""
    net_kw = {k: v for k, v in settings.items() if k in _NET_KEYS}
    train_kw = {k: v for k, v in settings.items() if k in {f for f in asdict(manifest.training)}}
    refine_kw = {k: v for k, v in settings.items() if k in ("lam", "vote")}
    feat_kw = {k: v for k, v in settings.items() if k in asdict(manifest.features)}
    split_kw = {"seed": settings["split_seed"]} if "split_seed" in settings else {}
    return replace(
        manifest,
        network=replace(manifest.network, **net_kw),
        training=replace(manifest.training, **train_kw),
        refine=replace(manifest.refine, **refine_kw),
        features=replace(manifest.features, **feat_kw),
        split=replace(manifest.split, **split_kw),
    )


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise InputError(f"{args.config}: {exc}") from exc
        out.update(parse_train_config(text))
    for key in ("K", "lr", "epochs", "lam", "seed", "sc_radial_bins", "sc_angle_bins", "si_bins", "vote"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "widths", None):
        out["widths"] = tuple(int(w) for w in args.widths.split(","))
    return out


def _log_config(name: str, cfg) -> None:
    logger.info("%s resolved config: %s", name, json.dumps(cfg, sort_keys=True, default=list))


# ---------------------------------------------------------------------------
# subcommands


def cmd_info(args) -> int:
    mesh = _load_mesh(args.mesh)
    report = check_manifold(mesh)
    print(f"faces: {mesh.n_faces}, manifold: {'yes' if report.is_manifold else 'no'}")
    print(f"vertices: {mesh.n_vertices}")
    print(f"components: {report.n_components}")
    print(f"bounding radius: {mesh.bounding_radius():.6g}")
    if not report.is_manifold:
        print(f"non-manifold edges: {len(report.offending_edges)}")
        return EXIT_INVALID
    return EXIT_OK


def _feature_config(args) -> feat.FeatureConfig:
    kw = {k: getattr(args, k) for k in ("sc_radial_bins", "sc_angle_bins", "si_bins") if getattr(args, k, None)}
    return feat.FeatureConfig(**kw)


def _kinds(args) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in args.kinds.split(",")) if args.kinds else feat.KINDS
    bad = set(kinds) - set(feat.KINDS)
    if bad:
        raise ValueError(f"unknown feature kinds {sorted(bad)}")
    return kinds


def cmd_features(args) -> int:
    mesh = _load_mesh(args.mesh)
    fconfig = _feature_config(args)
    kinds = _kinds(args)
    _log_config("features", {"mesh": args.mesh, "kinds": kinds, **feat.config_dict(fconfig)})
    graph = build_dual_graph(mesh)
    os.makedirs(args.output, exist_ok=True)
    for kind, fm in feat.compute_features(mesh, graph, fconfig, kinds).items():
        path = os.path.join(args.output, f"{_stem(args.mesh)}.{kind}.features.npz")
        feat.save_features(path, fm)
        print(path)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    mesh = _load_mesh(args.mesh)
    fconfig = _feature_config(args)
    kinds = _kinds(args)
    K, P = args.K or 8, args.pool_layers
    _log_config("preprocess", {"mesh": args.mesh, "kinds": kinds, "K": K, "pool_layers": P,
                               **feat.config_dict(fconfig)})
    shape = LabeledShape(_stem(args.mesh), mesh, np.zeros(mesh.n_faces, dtype=np.int64), 1)
    (p,) = ev.preprocess_all([shape], kinds, fconfig, K, P, cache_dir=args.cache)
    nbrs = p.graph.neighbors()
    os.makedirs(args.output, exist_ok=True)
    for kind in kinds:
        fpath = os.path.join(args.output, f"{shape.name}.{kind}.features.npz")
        tpath = os.path.join(args.output, f"{shape.name}.{kind}.tables.npz")
        feat.save_features(fpath, p.raw[kind])
        # the cached tables omit the hierarchy; rebuilding it is cheap next to the descriptors
        local = feat.normalize_features(p.raw[kind]).values
        st, hierarchy = graphops.prepare_tables(nbrs, p.graph.edges, local, mesh.areas, K, P)
        graphops.save_tables(tpath, st, hierarchy)
        print(fpath)
        print(tpath)
    return EXIT_OK


MODEL_FILE = "model.json"


def cmd_train(args) -> int:
    manifest = apply_settings(_load_manifest(args.manifest), _overrides(args))
    _log_config("train", manifest.to_dict())
    shapes = manifest.load_shapes()
    prepared = ev.preprocess_all(shapes, manifest.kinds, manifest.features, manifest.network.K,
                                 len(manifest.network.widths), args.jobs, args.cache)
    names = [p.shape.name for p in prepared]
    train_idx, _ = ev.split_dataset(names, manifest.split)
    if args.all:
        train_idx = list(range(len(prepared)))
    nets = ev.train_feature_nets(prepared, train_idx, manifest, seed=manifest.training.seed, jobs=args.jobs)
    os.makedirs(args.output, exist_ok=True)
    model = {
        "kinds": list(manifest.kinds),
        "n_labels": manifest.n_labels,
        "features": feat.config_dict(manifest.features),
        "pool_layers": len(manifest.network.widths),
        "K": manifest.network.K,
        "refine": asdict(manifest.refine),
        "train_shapes": [names[i] for i in train_idx],
    }
    for kind, (spec, store, stats, losses) in nets.items():
        net.save_checkpoint(os.path.join(args.output, f"{kind}.ckpt.npz"), spec, store)
        save_npz(os.path.join(args.output, f"{kind}.stats.npz"), {"min": stats[0], "max": stats[1]})
        model.setdefault("final_loss", {})[kind] = losses[-1] if losses else None
        logger.info("%s: final epoch loss %s", kind, model["final_loss"][kind])
    with open(os.path.join(args.output, MODEL_FILE), "w") as fh:
        json.dump(model, fh, indent=2, sort_keys=True)
    with open(os.path.join(args.output, "train.cfg"), "w") as fh:
        fh.write(format_train_config({**asdict(manifest.training), **asdict(manifest.network)}))
    print(os.path.join(args.output, MODEL_FILE))
    return EXIT_OK


def _load_model(model_dir: str):
    try:
        with open(os.path.join(model_dir, MODEL_FILE)) as fh:
            model = json.load(fh)
        nets = {}
        for kind in model["kinds"]:
            spec, store = net.load_checkpoint(os.path.join(model_dir, f"{kind}.ckpt.npz"))
            with np.load(os.path.join(model_dir, f"{kind}.stats.npz")) as z:
                stats = (z["min"], z["max"])
            nets[kind] = (spec, store, stats, [])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{model_dir}: {exc}") from exc
    return model, nets


def cmd_predict(args) -> int:
    model, nets = _load_model(args.model)
    mesh = _load_mesh(args.mesh)
    fconfig = feat.FeatureConfig(**model["features"])
    _log_config("predict", {"model": args.model, "mesh": args.mesh, "vote": args.vote or model["refine"]["vote"]})
    shape = LabeledShape(_stem(args.mesh), mesh, np.zeros(mesh.n_faces, dtype=np.int64), model["n_labels"])
    (p,) = ev.preprocess_all([shape], tuple(model["kinds"]), fconfig, model["K"], model["pool_layers"],
                             cache_dir=args.cache)
    maps = []
    os.makedirs(args.output, exist_ok=True)
    for kind in model["kinds"]:
        spec, store, stats, _ = nets[kind]
        x = feat.normalize_features(p.raw[kind], stats).values
        prob = net.predict(spec, store, p.tables[kind], x)
        maps.append(prob)
        segment.save_table(os.path.join(args.output, f"{shape.name}.{kind}.prob.txt"), prob)
    voted = segment.vote_probabilities(maps, mode=args.vote or model["refine"]["vote"])
    path = os.path.join(args.output, f"{shape.name}.voted.txt")
    segment.save_table(path, voted)
    write_labels(os.path.join(args.output, f"{shape.name}.argmax.seg"), voted.argmax(axis=1))
    print(path)
    return EXIT_OK


def cmd_refine(args) -> int:
    mesh = _load_mesh(args.mesh)
    try:
        voted = segment.load_table(args.probabilities)
    except (OSError, ValueError) as exc:
        raise InputError(f"{args.probabilities}: {exc}") from exc
    if len(voted) != mesh.n_faces:
        raise ValueError(f"{len(voted)} probability rows for {mesh.n_faces} faces")
    lam = 1.0 if args.lam is None else args.lam
    _log_config("refine", {"mesh": args.mesh, "probabilities": args.probabilities, "lam": lam})
    graph = build_dual_graph(mesh)
    labels = segment.refine(voted, graph, lam, mesh.bounding_radius())
    write_labels(args.output, labels)
    print(args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = apply_settings(_load_manifest(args.manifest), _overrides(args))
    if args.trials is not None:
        manifest = replace(manifest, trials=args.trials)
    if args.evaluate_train:
        manifest = replace(manifest, evaluate_train=True)
    _log_config("eval", manifest.to_dict())
    report = ev.run_experiment(manifest, jobs=args.jobs, cache_dir=args.cache)
    with open(args.output, "w") as fh:
        fh.write(report.to_json() + "\n")
    if args.timings:
        with open(args.timings, "w") as fh:
            json.dump(report.timings, fh, indent=2, sort_keys=True)
    print(report.table())
    failed = [t for t in report.trials if "error" in t]
    if failed and len(failed) == len(report.trials):
        return EXIT_NUMERIC if any("NumericalError" in t["error"] for t in failed) else EXIT_INVALID
    return EXIT_OK


def export_ply(mesh: TriangleMesh, labels) -> str:
    """ASCII PLY text with per-face colors ``PALETTE[label % 12]``."""
    labels = np.asarray(labels)
    if len(labels) != mesh.n_faces:
        raise ValueError(f"{len(labels)} labels for {mesh.n_faces} faces")
    out = [
        "ply", "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x", "property float y", "property float z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    out += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices.tolist()]
    for (a, b, c), lab in zip(mesh.faces.tolist(), labels.tolist()):
        r, g, bl = PALETTE[int(lab) % len(PALETTE)]
        out.append(f"3 {a} {b} {c} {r} {g} {bl}")
    return "\n".join(out) + "\n"


def cmd_export(args) -> int:
    mesh = _load_mesh(args.mesh)
    labels = _load_labels(args.labels, mesh.n_faces)
    with open(args.output, "w", newline="\n") as fh:
        fh.write(export_ply(mesh, labels))
    print(args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_feature_flags(p) -> None:
    p.add_argument("--kinds", help="comma-separated subset of AGD,SC,SI (default: all)")
    p.add_argument("--sc-radial-bins", type=int, help="shape-context radial shells (default 5)")
    p.add_argument("--sc-angle-bins", type=int, help="shape-context angle bins (default 6)")
    p.add_argument("--si-bins", type=int, help="spin-image bins per axis (default 8)")


def _add_model_flags(p) -> None:
    p.add_argument("--config", help="training config file of 'key = value' lines")
    p.add_argument("--K", type=int, help="receptive-field size")
    p.add_argument("--widths", help="comma-separated conv block widths")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--lam", type=float, help="smoothness weight for refinement")
    p.add_argument("--vote", choices=("soft", "hard"), help="voting rule across feature networks")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--sc-radial-bins", type=int, help="shape-context radial shells")
    p.add_argument("--sc-angle-bins", type=int, help="shape-context angle bins")
    p.add_argument("--si-bins", type=int, help="spin-image bins per axis")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfcn", description="Mesh segmentation with shape fully convolutional networks.")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    parser.add_argument("--jobs", type=int, default=1, help="maximum worker processes (default 1)")
    parser.add_argument("--cache", default=None, help="directory for content-hash keyed stage caches")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="print mesh summary; exit 0 iff manifold")
    p.add_argument("mesh")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("features", help="compute raw per-face descriptors")
    p.add_argument("mesh")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("preprocess", help="compute descriptors and generating tables")
    p.add_argument("mesh")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--K", type=int, help="receptive-field size (default 8)")
    p.add_argument("--pool-layers", type=int, default=5, help="pooling layers (default 5)")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one network per descriptor on a manifest's training split")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True, help="model directory")
    p.add_argument("--all", action="store_true", help="train on every shape, ignoring the split")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-descriptor and voted label probabilities for a mesh")
    p.add_argument("model", help="model directory written by 'train'")
    p.add_argument("mesh")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--vote", choices=("soft", "hard"), help="override the model's voting rule")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("refine", help="graph-cut refinement of voted probabilities")
    p.add_argument("mesh")
    p.add_argument("probabilities", help="voted probability table written by 'predict'")
    p.add_argument("-o", "--output", required=True, help="output label file (.seg)")
    p.add_argument("--lam", type=float, help="smoothness weight (default 1.0)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="run a repeated-split experiment from a manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True, help="accuracy report (JSON)")
    p.add_argument("--timings", help="write wall-clock timings to this JSON file")
    p.add_argument("--trials", type=int, help="override the number of trials")
    p.add_argument("--evaluate-train", action="store_true", help="also score the training shapes")
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write a face-colored ASCII PLY")
    p.add_argument("mesh")
    p.add_argument("labels", help="per-face label file (.seg)")
    p.add_argument("-o", "--output", required=True, help="output .ply")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InputError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except net.NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, MeshError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
