import json

import numpy as np
import pytest

from morphoskel import cli
from morphoskel.phantom import CorpusRanges, generate_corpus
from morphoskel.skeleton import SkeletonGraph
from morphoskel.volume import LUMEN, SegmentationMap, read_array, read_features, read_volume, write_volume


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    items = generate_corpus(5, seed=3, shape=(24, 24, 8), ranges=CorpusRanges(radius=(4, 5), wall=(6, 6.5)))
    for k, it in enumerate(items):
        write_volume(it.seg, d / f"item_{k}.msv")
    return d


def write_spec(path, **kw):
    spec = {"shape": [32, 32, 16], "radius": 5, "wall": 9,
            "calcium": [{"frames": [2, 10], "angles": [20, 150]}]}
    spec.update(kw)
    path.write_text(json.dumps(spec))
    return path


def test_phantom_then_topo_validate(tmp_path, capsys):
    vol = tmp_path / "a.msv"
    assert cli.run(["phantom", "--spec", str(write_spec(tmp_path / "s.json")), "-o", str(vol)]) == 0
    capsys.readouterr()
    assert cli.run(["topo-validate", str(vol)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["violation_rate_lumen"] == 0.0 and out["violation_rate_calcium"] == 0.0


def test_topo_validate_detects_violation(tmp_path, capsys):
    labels = np.zeros((16, 16, 2), dtype=np.uint8)
    labels[4:12, 4:12] = LUMEN  # lumen touching background
    write_volume(SegmentationMap(labels), tmp_path / "bad.msv")
    assert cli.run(["topo-validate", str(tmp_path / "bad.msv")]) == 0
    assert json.loads(capsys.readouterr().out)["violation_rate_lumen"] == 1.0


def test_morph_extract(tmp_path, dataset):
    out = tmp_path / "f.csv"
    vol = sorted(dataset.glob("*.msv"))[0]
    assert cli.run(["morph-extract", str(vol), "--features", "lumen_area,calcium_area", "-o", str(out)]) == 0
    m = read_features(out)
    assert m.names == ("lumen_area", "calcium_area") and m.depth == 8
    bounds = tmp_path / "b.json"
    bounds.write_text(json.dumps({"lumen_area": [0, 100], "calcium_area": [0, 50]}))
    assert cli.run(["morph-extract", str(vol), "--normalize", str(bounds), "-o", str(out)]) == 0
    assert read_features(out).features.max() <= 1.0


def test_skeletonize_outputs(tmp_path, dataset):
    vol = str(sorted(dataset.glob("*.msv"))[0])
    assert cli.run(["skeletonize", vol, "-o", str(tmp_path / "g.json")]) == 0
    g = SkeletonGraph.from_json((tmp_path / "g.json").read_text())
    assert len(g) > 0
    assert cli.run(["skeletonize", vol, "-o", str(tmp_path / "g.msv")]) == 0
    assert read_volume(tmp_path / "g.msv").labels.sum() == len(g)
    assert cli.run(["skeletonize", vol, "--method", "soft", "--iterations", "3", "-o", str(tmp_path / "s.msv")]) == 0
    assert read_array(tmp_path / "s.msv").shape == (24, 24, 8)
    bad = tmp_path / "p.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.run(["skeletonize", vol, "--params", str(bad), "-o", str(tmp_path / "g2.json")]) == 2


def test_sample_requires_seed(tmp_path, dataset, capsys):
    assert cli.run(["sample", "--dataset", str(dataset), "-o", str(tmp_path / "o.msv")]) == 1
    assert "seed" in capsys.readouterr().err


def test_sample_deterministic(tmp_path, dataset):
    args = ["sample", "--dataset", str(dataset), "--steps", "8", "--mode", "ode", "--seed", "4"]
    assert cli.run(args + ["-o", str(tmp_path / "a.msv")]) == 0
    assert cli.run(args + ["-o", str(tmp_path / "b.msv")]) == 0
    assert (tmp_path / "a.msv").read_bytes() == (tmp_path / "b.msv").read_bytes()
    sde = ["sample", "--dataset", str(dataset), "--steps", "8", "--seed", "4", "--num-samples", "2"]
    assert cli.run(sde + ["-o", str(tmp_path / "c")]) == 0
    assert cli.run(sde + ["-o", str(tmp_path / "d")]) == 0
    for name in ("sample_000.msv", "sample_001.msv"):
        assert (tmp_path / "c" / name).read_bytes() == (tmp_path / "d" / name).read_bytes()


@pytest.mark.parametrize("guidance", ["cfg:w=2", "ang:w=3", "dps:w=2", "cg:w=2"])
def test_sample_with_guidance(tmp_path, dataset, guidance):
    target = str(sorted(dataset.glob("*.msv"))[1])
    rc = cli.run(["sample", "--dataset", str(dataset), "--steps", "5", "--seed", "1", "--guidance", guidance,
                  "--target", target, "-o", str(tmp_path / "g.msv")])
    assert rc == 0
    assert read_volume(tmp_path / "g.msv").shape == (24, 24, 8)


def test_guidance_without_target_is_usage_error(tmp_path, dataset):
    rc = cli.run(["sample", "--dataset", str(dataset), "--seed", "1", "--guidance", "ang:w=3",
                  "-o", str(tmp_path / "g.msv")])
    assert rc == 1


def test_sampler_config_file(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 4, "mode": "ode"}))
    assert cli.run(["sample", "--dataset", str(dataset), "--config", str(cfg), "--seed", "0",
                    "-o", str(tmp_path / "a.msv")]) == 0
    cfg.write_text(json.dumps({"steps": 4, "colour": 1}))
    assert cli.run(["sample", "--dataset", str(dataset), "--config", str(cfg), "--seed", "0",
                    "-o", str(tmp_path / "a.msv")]) == 1


def test_edit_keeps_outside_frames(tmp_path, dataset):
    ref = sorted(dataset.glob("*.msv"))[2]
    out = tmp_path / "e.msv"
    assert cli.run(["edit", str(ref), "--dataset", str(dataset), "--steps", "6", "--seed", "2",
                    "--frames", "2:5", "-o", str(out)]) == 0
    a, b = read_volume(ref).labels, read_volume(out).labels
    assert np.array_equal(a[:, :, :2], b[:, :, :2]) and np.array_equal(a[:, :, 5:], b[:, :, 5:])
    assert cli.run(["edit", str(ref), "--dataset", str(dataset), "--seed", "2", "-o", str(out)]) == 1
    assert cli.run(["edit", str(ref), "--dataset", str(dataset), "--seed", "2", "--tissue", "bone",
                    "-o", str(out)]) == 1


@pytest.mark.filterwarnings("ignore:dropping zero-variance")
def test_evaluate_identical_sets(tmp_path, dataset):
    report = tmp_path / "r.json"
    assert cli.run(["evaluate", "--real", str(dataset), "--gen", str(dataset), "--out", str(report)]) == 0
    r = json.loads(report.read_text())
    assert r["fd_3d"] < 1e-6 and r["fd_2d"] < 1e-6
    assert r["precision_2d"] == r["recall_2d"] == 1.0
    assert r["morph_mae"] == 0.0 and r["skel_mae"] == 0.0
    assert r["topo_violation_lumen"] == 0.0
    assert cli.run(["evaluate", "--real", str(dataset), "--gen", str(dataset), "--metrics", "xyz"]) == 1


def test_data_errors(tmp_path, dataset):
    bad = tmp_path / "bad.msv"
    bad.write_bytes(b"not a volume")
    assert cli.run(["topo-validate", str(bad)]) == 2
    assert cli.run(["topo-validate", str(tmp_path / "missing.msv")]) == 2
    assert cli.run(["evaluate", "--real", str(tmp_path), "--gen", str(dataset)]) == 2
    spec = tmp_path / "s.json"
    spec.write_text("{nope")
    assert cli.run(["phantom", "--spec", str(spec), "-o", str(tmp_path / "p.msv")]) == 2
    write_spec(spec, radius=30)
    assert cli.run(["phantom", "--spec", str(spec), "-o", str(tmp_path / "p.msv")]) == 2


def test_usage_errors(capsys):
    assert cli.run([]) == 1
    assert cli.run(["frobnicate"]) == 1
    assert cli.run(["--log-level", "chatty", "topo-validate", "x.msv"]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.run(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "MSV1 schema 1.0" in out and "report schema 1.0" in out
