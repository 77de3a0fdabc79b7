import csv
import json
import os
import subprocess
import sys
from collections import OrderedDict

import numpy as np
import pytest

from mvprior import cli, dataprep, mgd, store
from mvprior import network as net
from mvprior.geometry import FrameDims


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_prior(path, g):
    g.save(path)
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    prior = write_prior(root / "desk.json", dataprep.desk_motion_prior())
    data = root / "data"
    rc = cli.main(["synth", "--seed", "4", "--sequences", "10", "--len", "5", "--val", "3",
                   "--dims", "64x64", "--prior", prior, "--out", str(data)])
    assert rc == 0
    return root, data


@pytest.fixture(scope="module")
def runs(dataset):
    root, data = dataset
    out = {}
    for variant in ("plain", "unet"):
        d = root / f"run_{variant}"
        rc = cli.main(["train", str(data), "--out", str(d), "--variant", variant, "--patch", "16",
                       "--batch", "4", "--steps", "50", "--val-interval", "25", "--cycle", "20", "--seed", "1"])
        assert rc == 0
        out[variant] = d
    return out


def test_synth_deterministic(tmp_path, capsys):
    args = ["synth", "--seed", "7", "--sequences", "6", "--len", "4", "--dims", "48x40", "--val", "2"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("synth: 6 requested,") and "accepted" in line and "rejected" in line
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_synth_thread_count_does_not_matter(tmp_path, monkeypatch):
    args = ["synth", "--seed", "2", "--sequences", "6", "--len", "3", "--dims", "48x48"]
    monkeypatch.setenv("MVPRIOR_THREADS", "1")
    assert cli.main(args + ["--out", str(tmp_path / "one")]) == 0
    monkeypatch.setenv("MVPRIOR_THREADS", "3")
    assert cli.main(args + ["--out", str(tmp_path / "three")]) == 0
    assert tree(tmp_path / "one") == tree(tmp_path / "three")


def test_synth_default_prior_and_empty(tmp_path):
    assert cli.main(["synth", "--sequences", "0", "--out", str(tmp_path)]) == 0
    man = store.read_manifest(tmp_path)
    assert man.sequences == []
    assert np.array_equal(man.meta["prior"]["mu"], mgd.published_prior().mu)


def test_synth_split(dataset):
    _, data = dataset
    man = store.read_manifest(data)
    assert len(man.split("val")) == 3 and len(man.split("train")) == 7
    assert all(int(e.id) >= 7 for e in man.split("val"))


def test_analyze_matches_library(dataset, tmp_path, capsys):
    root, data = dataset
    out = tmp_path / "prior.json"
    assert cli.main(["analyze", str(data), "--out", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    g = mgd.GaussianND.load(out)
    assert printed["k"] == 5
    prior = dataprep.desk_motion_prior()
    seqs = [dataprep.synthesize_sequence(prior, None, 5, FrameDims(64, 64), dataprep.sequence_rng(4, i))
            for i in range(10)]
    ref = dataprep.analyze_dataset([s for s in seqs if dataprep.filter_sequence(s)])
    assert np.allclose(g.mu, ref.mu, rtol=0, atol=1e-12) and np.allclose(g.sigma, ref.sigma, rtol=0, atol=1e-12)


def test_analyze_closes_the_loop_on_rectangles(tmp_path):
    desk = dataprep.desk_motion_prior()
    prior = write_prior(tmp_path / "desk.json", desk)
    assert cli.main(["synth", "--seed", "3", "--sequences", "80", "--len", "12", "--val", "0", "--dims", "256x256",
                     "--shapes", "rect", "--prior", prior, "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["meta"]["shapes"] == "rect"
    assert cli.main(["analyze", str(tmp_path / "d")]) == 0
    g = mgd.GaussianND.load(tmp_path / "d" / "prior.json")
    sd = desk.std
    assert np.all(np.abs(g.mu - desk.mu) <= 0.10 * sd)
    assert np.all(np.abs(g.sigma - desk.sigma) <= 0.15 * np.outer(sd, sd))


def test_analyze_static_dataset(tmp_path):
    static = write_prior(tmp_path / "static.json", mgd.GaussianND([1, 1, 0, 0, 0], np.zeros((5, 5))))
    assert cli.main(["synth", "--sequences", "3", "--len", "4", "--dims", "48x48", "--prior", static,
                     "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["analyze", str(tmp_path / "d")]) == 0
    g = mgd.GaussianND.load(tmp_path / "d" / "prior.json")
    assert np.allclose(g.sigma, 0, atol=1e-20)
    assert np.allclose(g.mu, [1, 1, 0, 0, 0])


def test_analyze_errors(tmp_path, capsys):
    assert cli.main(["synth", "--sequences", "0", "--out", str(tmp_path / "empty")]) == 0
    assert cli.main(["analyze", str(tmp_path / "empty")]) == cli.EXIT_DATA
    assert cli.main(["synth", "--sequences", "2", "--len", "3", "--dims", "48x48",
                     "--out", str(tmp_path / "bad")]) == 0
    frame = next((tmp_path / "bad").rglob("frame_001.pgm"))
    frame.write_bytes(b"P5\n48 48\n255\n" + bytes([7]) * (48 * 48))
    capsys.readouterr()
    assert cli.main(["analyze", str(tmp_path / "bad")]) == cli.EXIT_DATA
    assert str(frame) in capsys.readouterr().err


def test_train_outputs(runs):
    for variant, d in runs.items():
        assert (d / "checkpoint.bin").is_file()
        rows = list(csv.DictReader(open(d / "train.csv")))
        assert len(rows) == 50 and list(rows[0]) == ["step", "lr", "l_total", "l_cons", "l_kl"]
        vals = list(csv.DictReader(open(d / "val.csv")))
        assert [int(v["step"]) for v in vals] == [0, 25, 50]
        _, header, _ = net.load_checkpoint(d / "checkpoint.bin")
        assert header["architecture"]["variant"] == variant and header["step"] == 50


def test_train_reproducible(dataset, runs, tmp_path):
    _, data = dataset
    d = tmp_path / "again"
    assert cli.main(["train", str(data), "--out", str(d), "--variant", "unet", "--patch", "16", "--batch", "4",
                     "--steps", "50", "--val-interval", "25", "--cycle", "20", "--seed", "1"]) == 0
    for name in ("train.csv", "val.csv", "checkpoint.bin"):
        assert (d / name).read_bytes() == (runs["unet"] / name).read_bytes()


def test_train_resume(dataset, runs, tmp_path):
    _, data = dataset
    d = tmp_path / "half"
    base = ["--variant", "plain", "--patch", "16", "--batch", "4", "--val-interval", "25", "--cycle", "20",
            "--seed", "1"]
    assert cli.main(["train", str(data), "--out", str(d), "--steps", "30"] + base) == 0
    assert cli.main(["train", str(data), "--out", str(tmp_path / "rest"), "--resume", str(d / "checkpoint.bin"),
                     "--steps", "50"]) == 0
    full = list(csv.DictReader(open(runs["plain"] / "train.csv")))
    rest = list(csv.DictReader(open(tmp_path / "rest" / "train.csv")))
    assert rest == full[30:]
    assert (tmp_path / "rest" / "checkpoint.bin").read_bytes() == (runs["plain"] / "checkpoint.bin").read_bytes()


def test_train_numeric_failure(dataset, runs, tmp_path, capsys):
    _, data = dataset
    params, header, extra = net.load_checkpoint(runs["plain"] / "checkpoint.bin")
    bad = OrderedDict(params.tensors)
    bad["outc.b"] = np.array([np.nan, 0.0])
    net.save_checkpoint(tmp_path / "nan.bin", net.NetworkParams(params.arch, bad), seed=header["seed"],
                        step=header["step"], extra=extra, meta=header["meta"])
    rc = cli.main(["train", str(data), "--out", str(tmp_path / "o"), "--resume", str(tmp_path / "nan.bin"),
                   "--steps", "60"])
    assert rc == cli.EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def _metrics(path):
    return list(csv.DictReader(open(path)))


def test_eval_inject_gt(dataset, runs, tmp_path):
    _, data = dataset
    assert cli.main(["eval", str(runs["plain"] / "checkpoint.bin"), str(data), "--out", str(tmp_path),
                     "--inject-gt"]) == 0
    rows = _metrics(tmp_path / "metrics.csv")
    assert len(rows) == 15
    assert all(float(r["j"]) == 1 and float(r["f"]) == 1 and float(r["mse"]) == 0 for r in rows)
    assert list(rows[0]) == ["sequence", "frame", "j", "f", "mse", "nll", "mae", "fbeta"]


def test_eval_deterministic_and_dump(dataset, runs, tmp_path):
    _, data = dataset
    ck = str(runs["unet"] / "checkpoint.bin")
    assert cli.main(["eval", ck, str(data), "--out", str(tmp_path / "a"), "--dump-masks", "--batch", "8"]) == 0
    assert cli.main(["eval", ck, str(data), "--out", str(tmp_path / "b"), "--dump-masks", "--batch", "8"]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    dumped = sorted((tmp_path / "a" / "masks").rglob("*.pgm"))
    assert len(dumped) == 15
    assert store.read_pgm(dumped[0]).shape == (16, 16)


def test_eval_untrained_masks_are_distinct(tmp_path, dataset):
    _, data = dataset
    params = net.init_params(net.Architecture("plain", 16), 0)
    net.save_checkpoint(tmp_path / "init.bin", params, seed=0, step=0)
    man = store.read_manifest(data)
    s = store.read_sequence(data, man.split("val")[0], man.dims)
    patch = dataprep.crop_patch(s.images[0], s.frames[0], 16)
    from mvprior import train as tr
    res = tr.tiled_inference(params, patch.image, patch.gt_mask, mgd.published_prior(), 16, np.random.default_rng(0))
    assert res.distinct() > 1
    assert cli.main(["eval", str(tmp_path / "init.bin"), str(data), "--out", str(tmp_path / "e"),
                     "--batch", "16"]) == 0


def test_eval_config_mismatch(dataset, runs, tmp_path):
    _, data = dataset
    ck = str(runs["plain"] / "checkpoint.bin")
    assert cli.main(["eval", ck, str(data), "--out", str(tmp_path), "--patch", "32"]) == cli.EXIT_DATA
    assert cli.main(["eval", ck, str(data), "--out", str(tmp_path), "--variant", "unet"]) == cli.EXIT_DATA
    assert cli.main(["eval", str(tmp_path / "none.bin"), str(data), "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_report(dataset, runs, tmp_path):
    _, data = dataset
    run = runs["plain"]
    assert cli.main(["eval", str(run / "checkpoint.bin"), str(data), "--out", str(tmp_path / "e")]) == 0
    for name in ("r1", "r2"):
        assert cli.main(["report", str(run), "--out", str(tmp_path / name),
                         "--metrics", str(tmp_path / "e" / "metrics.csv")]) == 0
    files = sorted(p.name for p in (tmp_path / "r1").iterdir())
    assert files == ["losses.svg", "metrics.svg", "validation.svg"]
    assert tree(tmp_path / "r1") == tree(tmp_path / "r2")
    assert b"<svg" in (tmp_path / "r1" / "losses.svg").read_bytes()
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_DATA


def test_usage_errors(tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as e:
        cli.main(["synth", "--out", str(tmp_path), "--dims", "64"])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["train", str(tmp_path), "--out", str(tmp_path), "--variant", "resnet"])
    assert e.value.code == cli.EXIT_USAGE
    assert cli.main(["synth", "--out", str(tmp_path), "--len", "0"]) == cli.EXIT_USAGE
    monkeypatch.setenv("MVPRIOR_THREADS", "zero")
    assert cli.main(["synth", "--out", str(tmp_path), "--sequences", "0"]) == cli.EXIT_USAGE


def test_bad_prior_file(tmp_path):
    (tmp_path / "p.json").write_text('{"k": 2, "mu": [0, 0], "sigma": [[1, 0], [0, 1]]}')
    assert cli.main(["synth", "--out", str(tmp_path / "d"), "--prior", str(tmp_path / "p.json")]) == cli.EXIT_DATA
    assert cli.main(["synth", "--out", str(tmp_path / "d"), "--prior", str(tmp_path / "no.json")]) == cli.EXIT_DATA


def test_console_script_exit_code(tmp_path):
    env = dict(os.environ)
    r = subprocess.run([sys.executable, "-m", "mvprior.cli", "analyze", str(tmp_path)], capture_output=True,
                       text=True, env=env)
    assert r.returncode == cli.EXIT_DATA
    assert "manifest" in r.stderr
    r = subprocess.run([sys.executable, "-m", "mvprior.cli"], capture_output=True, text=True, env=env)
    assert r.returncode == cli.EXIT_USAGE
