import json

import numpy as np
import pytest

from lkdist import bench
from lkdist.cli import main
from lkdist.engine import load_index


@pytest.fixture
def workdir(tmp_path):
    spec = {"d": 2, "blobs": [{"center": [0, 0], "sigma": 0.3, "n": 120}, {"center": [3, 3], "sigma": 1.0, "n": 120}]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    cfg = {"model": {"type": "tree", "max_depth": 4}, "bounds": {"aggregate": "KD"},
           "trainer": {"iterations": 2}, "eval": {"ks": [1, 2, 4]}, "k_max": 8}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def _json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_pipeline(workdir, capsys):
    w = workdir
    main(["synth", "--spec", str(w / "spec.json"), "--seed", "1", "--out", str(w / "pts.csv")])
    assert _json(capsys)["n"] == 240
    main(["kdist", "--dataset", str(w / "pts.csv"), "--kmax", "8", "--out", str(w / "t.kdt")])
    main(["train", "--dataset", str(w / "pts.csv"), "--config", str(w / "cfg.json"), "--table", str(w / "t.kdt"),
          "--out", str(w / "tree.lkdi")])
    capsys.readouterr()
    main(["baseline", "--dataset", str(w / "pts.csv"), "--kmax", "8", "--out", str(w / "cop.lkdi")])
    assert _json(capsys)["param_count"] == 4 * 240
    main(["eval", "--dataset", str(w / "pts.csv"), "--config", str(w / "cfg.json"), "--index", str(w / "tree.lkdi"),
          "--out", str(w / "m.csv")])
    rep = _json(capsys)
    assert rep["ks"] == [1, 2, 4] and rep["param_count"] == load_index(w / "tree.lkdi").param_count()
    main(["eval", "--dataset", str(w / "pts.csv"), "--config", str(w / "cfg.json"), "--index", str(w / "cop.lkdi"),
          "--out", str(w / "m.csv")])
    main(["query", "--dataset", str(w / "pts.csv"), "--index", str(w / "tree.lkdi"), "--k", "3", "--point", "5"])
    q = _json(capsys)
    pts = np.loadtxt(w / "pts.csv", delimiter=",")
    from lkdist.core import Dataset
    from lkdist.oracle import rknn_bruteforce
    assert set(q["result"]) == rknn_bruteforce(Dataset(pts), pts[5], 3, q_index=5)
    main(["query", "--dataset", str(w / "pts.csv"), "--index", str(w / "cop.lkdi"), "--k", "2", "--coords", "0.1,0.2"])
    assert set(_json(capsys)["result"]) == rknn_bruteforce(Dataset(pts), np.array([0.1, 0.2]), 2)
    main(["skyline", "--metrics", str(w / "m.csv"), "--out", str(w / "sky.svg")])
    assert (w / "sky.svg").read_text().startswith("<svg")
    rows = bench.read_metrics(w / "m.csv")
    assert [r["model_type"] for r in rows] == ["tree", "cop"]


def test_search_and_ablate(workdir, capsys):
    w = workdir
    main(["synth", "--spec", str(w / "spec.json"), "--out", str(w / "pts.csv")])
    cfg = json.loads((w / "cfg.json").read_text())
    cfg["search"] = {"model_types": ["tree"], "tree": {"max_depth": [1, 5]}, "aggregate": ["K", "KD"]}
    (w / "cfg.json").write_text(json.dumps(cfg))
    main(["search", "--dataset", str(w / "pts.csv"), "--config", str(w / "cfg.json"), "--trials", "3",
          "--seed", "4", "--out", str(w / "s.csv"), "--save-dir", str(w / "trials")])
    assert len(bench.read_metrics(w / "s.csv")) == 3
    assert len(list((w / "trials").glob("*.lkdi"))) == 3
    main(["ablate", "--dataset", str(w / "pts.csv"), "--config", str(w / "cfg.json"), "--out", str(w / "a.csv")])
    out = capsys.readouterr().out
    assert "SKDM" in out
    assert len(bench.read_metrics(w / "a.csv")) == 12


def test_missing_dataset_exits(workdir):
    with pytest.raises(SystemExit):
        main(["train", "--out", str(workdir / "x.lkdi")])
