import json

import numpy as np
import pytest

from meshes import TETRA_OFF, tetrahedron
from sfcn import cli
from sfcn import evaluate as ev
from sfcn.experiments import ExperimentConfig, base_manifest, write_dataset
from sfcn.mesh import load_mesh, read_labels, write_labels

FAN_OFF = """OFF
5 3 0
0 0 0
1 0 0
0 1 0
0 -1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 1 4
"""


def run(argv):
    return cli.main(["--log-level", "WARNING", *map(str, argv)])


# ---------------------------------------------------------------------------
# info


def test_info_tetrahedron(tmp_path, capsys):
    (tmp_path / "t.off").write_text(TETRA_OFF)
    assert run(["info", tmp_path / "t.off"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "faces: 4, manifold: yes"
    assert "components: 1" in out


def test_info_non_manifold(tmp_path, capsys):
    (tmp_path / "fan.off").write_text(FAN_OFF)
    assert run(["info", tmp_path / "fan.off"]) == cli.EXIT_INVALID
    assert "manifold: no" in capsys.readouterr().out


def test_info_load_errors(tmp_path):
    (tmp_path / "empty.off").write_text("")
    assert run(["info", tmp_path / "empty.off"]) == cli.EXIT_IO
    assert run(["info", tmp_path / "missing.off"]) == cli.EXIT_IO


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        run(["info", "--bogus", "x.off"])
    assert exc.value.code != 0


# ---------------------------------------------------------------------------
# export


def _ply_colors(text):
    lines = text.splitlines()
    body = lines[lines.index("end_header") + 1:]
    return {tuple(line.split()[4:]) for line in body if line.startswith("3 ")}


def test_export_single_label():
    assert len(_ply_colors(cli.export_ply(tetrahedron(), [2, 2, 2, 2]))) == 1


def test_export_three_labels_and_wraparound():
    assert len(_ply_colors(cli.export_ply(tetrahedron(), [0, 1, 2, 1]))) == 3
    assert cli.export_ply(tetrahedron(), [0, 0, 0, 0]) == cli.export_ply(tetrahedron(), [12, 24, 0, 36])


def test_export_length_mismatch():
    with pytest.raises(ValueError):
        cli.export_ply(tetrahedron(), [0, 1])


def test_export_command_is_byte_identical(tmp_path):
    (tmp_path / "t.off").write_text(TETRA_OFF)
    write_labels(tmp_path / "t.seg", np.array([0, 1, 2, 0]))
    assert run(["export", tmp_path / "t.off", tmp_path / "t.seg", "-o", tmp_path / "a.ply"]) == 0
    assert run(["export", tmp_path / "t.off", tmp_path / "t.seg", "-o", tmp_path / "b.ply"]) == 0
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    text = (tmp_path / "a.ply").read_text()
    assert text.startswith("ply\nformat ascii 1.0\n") and "element face 4" in text
    write_labels(tmp_path / "short.seg", np.array([0, 1]))
    assert run(["export", tmp_path / "t.off", tmp_path / "short.seg", "-o", tmp_path / "c.ply"]) == cli.EXIT_INVALID


# ---------------------------------------------------------------------------
# training config files


def test_parse_train_config():
    text = "# schedule\nepochs = 12\nlr=0.001  # base\nwidths = 8, 16\nbatch_norm = false\nlr_steps = 0.5,0.9\n"
    cfg = cli.parse_train_config(text)
    assert cfg == {"epochs": 12, "lr": 0.001, "widths": (8, 16), "batch_norm": False, "lr_steps": (0.5, 0.9)}
    assert cli.parse_train_config(cli.format_train_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["epochs 12", "learning_rate = 1", "epochs = many", "batch_norm = maybe"])
def test_parse_train_config_errors(text):
    with pytest.raises(ValueError):
        cli.parse_train_config(text)


def test_apply_settings():
    m = base_manifest(ExperimentConfig(), 2)
    out = cli.apply_settings(m, {"epochs": 3, "widths": (4,), "lam": 0.25, "si_bins": 4, "K": 6})
    assert out.training.epochs == 3 and out.network.widths == (4,) and out.network.K == 6
    assert out.refine.lam == 0.25 and out.features.si_bins == 4
    assert m.training.epochs == 60


# ---------------------------------------------------------------------------
# full pipeline


MODEL_FLAGS = ["--widths", "16,32", "--epochs", "40", "--lr", "1e-4", "--K", "8"]


def _pipeline(root, data):
    """preprocess -> train -> predict -> refine -> eval -> export; returns every written file."""
    manifest = data / "manifest.json"
    mesh = data / "dumbbell_0_0.off"
    assert run(["preprocess", mesh, "-o", root / "prep", "--pool-layers", "2", "--kinds", "SI"]) == 0
    assert run(["train", manifest, "-o", root / "model", "--all", *MODEL_FLAGS]) == 0
    assert run(["predict", root / "model", mesh, "-o", root / "pred"]) == 0
    voted = root / "pred" / "dumbbell_0_0.voted.txt"
    assert run(["refine", mesh, voted, "-o", root / "refined.seg"]) == 0
    assert run(["eval", manifest, "-o", root / "report.json", "--timings", root / "timings.json", *MODEL_FLAGS]) == 0
    assert run(["export", mesh, root / "refined.seg", "-o", root / "refined.ply"]) == 0
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name != "timings.json")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    write_dataset(base_manifest(ExperimentConfig(faces=300), 2), str(data))
    return data


def test_cli_pipeline_is_byte_reproducible(tmp_path, dataset):
    a = _pipeline(tmp_path / "a", dataset)
    b = _pipeline(tmp_path / "b", dataset)
    rel = [p.relative_to(tmp_path / "a") for p in a]
    assert rel == [p.relative_to(tmp_path / "b") for p in b]
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes(), p
    names = {p.name for p in rel}
    assert {"AGD.ckpt.npz", "SC.stats.npz", "model.json", "train.cfg", "dumbbell_0_0.SI.tables.npz",
            "dumbbell_0_0.AGD.prob.txt", "dumbbell_0_0.argmax.seg", "refined.seg", "report.json"} <= names

    mesh = load_mesh(dataset / "dumbbell_0_0.off")
    with np.load(tmp_path / "a" / "prep" / "dumbbell_0_0.SI.tables.npz") as z:
        assert z["header"].tolist() == [mesh.n_faces, 8, 2]
        assert {"order_0", "parent_0", "order_4", "table_1", "mask_2"} <= set(z.files)
    labels = read_labels(tmp_path / "a" / "refined.seg")
    assert len(labels) == mesh.n_faces
    gt = read_labels(dataset / "dumbbell_0_0.seg")
    assert ev.labeling_accuracy(labels, gt, mesh.areas)["area_weighted"] > 0.9
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["summary"]["n_trials"] == 1
    assert "preprocess_s" in json.loads((tmp_path / "a" / "timings.json").read_text())
    model = json.loads((tmp_path / "a" / "model" / "model.json").read_text())
    assert model["pool_layers"] == 2 and len(model["train_shapes"]) == 2
    assert "epochs = 40" in (tmp_path / "a" / "model" / "train.cfg").read_text()


def test_cli_train_config_file_and_cache(tmp_path, dataset):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 2\nlr = 1e-4\nwidths = 8\nfc_width = 16\n")
    cache = tmp_path / "cache"
    argv = ["--cache", cache, "train", dataset / "manifest.json", "-o", tmp_path / "m", "--config", cfg, "--all"]
    assert run(argv) == 0
    entries = sorted(cache.iterdir())
    assert len(entries) == 2
    assert run(argv) == 0
    assert sorted(cache.iterdir()) == entries
    model = json.loads((tmp_path / "m" / "model.json").read_text())
    assert model["pool_layers"] == 1 and len(model["train_shapes"]) == 2


def test_cli_bad_manifest(tmp_path, dataset):
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["train", tmp_path / "bad.json", "-o", tmp_path / "m"]) == cli.EXIT_IO
    d = json.loads((dataset / "manifest.json").read_text())
    d["shapes"][0]["mesh"] = "absent.off"
    (dataset / "broken.json").write_text(json.dumps(d))
    try:
        assert run(["eval", dataset / "broken.json", "-o", tmp_path / "r.json"]) == cli.EXIT_IO
    finally:
        (dataset / "broken.json").unlink()
    d["unknown"] = 1
    (tmp_path / "unknown.json").write_text(json.dumps(d))
    assert run(["eval", tmp_path / "unknown.json", "-o", tmp_path / "r.json"]) == cli.EXIT_INVALID


def test_cli_refine_row_mismatch(tmp_path):
    (tmp_path / "t.off").write_text(TETRA_OFF)
    (tmp_path / "p.txt").write_text("0 0.5 0.5\n1 0.2 0.8\n")
    assert run(["refine", tmp_path / "t.off", tmp_path / "p.txt", "-o", tmp_path / "o.seg"]) == cli.EXIT_INVALID


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numerical_failure_exit_code(tmp_path, dataset):
    # a huge learning rate makes the loss diverge in every trial
    argv = ["eval", dataset / "manifest.json", "-o", tmp_path / "r.json",
            "--widths", "8", "--epochs", "30", "--lr", "1e6"]
    assert run(argv) == cli.EXIT_NUMERIC
    report = json.loads((tmp_path / "r.json").read_text())
    assert "NumericalError" in report["trials"][0]["error"]
