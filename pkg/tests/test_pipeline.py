import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from laeids.bundle import ModelBundle, pack_container, unpack_container
from laeids.classify import Tier, predict_batch
from laeids.errors import InfeasibleFraction, StageError
from laeids.harness import pipeline as P
from laeids.harness.cli import main

SMALL = {
    "data": {"n_train": 240, "n_test": 120},
    "diffusion": {"epochs": 3, "hidden": [32, 16]},
    "selection": {"particles": 6, "epochs": 3},
    "scenario": {"steps": 12},
}
ARTIFACTS = {"config.json", "memory.fmem", "repository.json", "models.bundle", "scenario.jsonl", "alerts.jsonl",
             "latency.json", "metrics.json", "manifest.json"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return P.run_pipeline(SMALL, tmp_path_factory.mktemp("run") / "a")


def test_run_directory_contents(run_dir):
    names = {p.name for p in run_dir.iterdir() if p.is_file()}
    assert ARTIFACTS <= names
    logs = {p.name for p in (run_dir / "logs").iterdir()}
    assert {"stages.jsonl", "pretrain.jsonl", "selection.jsonl"} <= logs
    stages = [json.loads(l)["stage"] for l in (run_dir / "logs" / "stages.jsonl").read_text().splitlines()]
    assert stages[:3] == ["ingest", "scaler", "pretrain"] and "replay" in stages
    m = json.loads((run_dir / "metrics.json").read_text())
    assert 0.0 <= m["accuracy"] <= 1.0 and set(m["holdout"]) == {"LIGHT", "MEDIUM", "HEAVY"}
    assert m["config_digest"] == P.config_digest(P.merge_config(SMALL))
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["deterministic"] is True and manifest["seed"] == 0
    assert set(manifest["artifacts"]) >= ARTIFACTS - {"manifest.json"}


def test_manifest_replay_bit_identical(run_dir, tmp_path):
    out = P.replay_manifest(run_dir / "manifest.json", tmp_path / "b")
    for name in ("metrics.json", "alerts.jsonl", "repository.json", "models.bundle", "memory.fmem"):
        assert (out / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_bundle_roundtrip(run_dir):
    b = ModelBundle.load(run_dir / "models.bundle")
    assert b.to_bytes() == (run_dir / "models.bundle").read_bytes()
    assert set(b.pool[b.default_mask]) == set(Tier)
    d = b.describe()
    assert d["default_mask"] == b.default_mask and d["schema_digest"] == b.schema_digest
    X = np.random.default_rng(0).normal(size=(4, b.pool[b.default_mask][Tier.LIGHT].n_inputs))
    again = ModelBundle.from_bytes(b.to_bytes())
    for t in Tier:
        assert np.array_equal(predict_batch(again.pool[b.default_mask][t], X),
                              predict_batch(b.pool[b.default_mask][t], X))


def test_container_format():
    blob = pack_container({"k": 1}, {"a": np.arange(5, dtype="<i8"), "b": np.ones((2, 3))})
    meta, arrays = unpack_container(blob)
    assert meta["k"] == 1 and arrays["a"].tolist() == [0, 1, 2, 3, 4] and arrays["b"].shape == (2, 3)
    with pytest.raises(ValueError):
        unpack_container(b"XXXX" + blob[4:])


def test_stage_error_names_stage(tmp_path):
    bad = {**SMALL, "data": {"source": "csv", "csv_path": str(tmp_path / "missing.csv")}}
    with pytest.raises(StageError) as ei:
        P.run_pipeline(bad, tmp_path / "c")
    assert ei.value.stage == "ingest"
    rec = json.loads((tmp_path / "c" / "logs" / "stages.jsonl").read_text().splitlines()[-1])
    assert rec["status"] == "failed" and (tmp_path / "c" / "config.json").exists()


def test_tabular_mode_skips_pretraining(tmp_path):
    out = P.run_pipeline(P.merge_config({"classify": {"feature_mode": "tabular"}}, P.merge_config(SMALL)),
                         tmp_path / "t")
    assert not (out / "memory.fmem").exists()
    assert json.loads((out / "metrics.json").read_text())["accuracy"] > 0.9


def test_label_efficiency_curve_small():
    cfg = P.merge_config(SMALL)
    ds = P.load_dataset(cfg)
    table = P.label_efficiency_curve(ds, [0.1, 0.5, 1.0], 0, cfg)
    assert set(table) == {(f, p) for f in (0.1, 0.5, 1.0) for p in P.PIPELINES}
    # fraction 1.0 equals a plain train/eval run of the raw comparator
    names = ds.schema.class_names
    from laeids.classify import tier_config, train_tier
    m = train_tier(Tier.MEDIUM, ds.tabular(ds.train), ds.labels(ds.train), tier_config(Tier.MEDIUM), names)
    acc = float(np.mean(predict_batch(m, ds.tabular(ds.test)).argmax(1) == ds.labels(ds.test)))
    assert table[(1.0, "raw-supervised")].accuracy == acc
    with pytest.raises(InfeasibleFraction):
        P.stratified_subsample(ds.train, 0.001, names, 0)


def test_stratified_subsample_keeps_proportions():
    cfg = P.merge_config(SMALL)
    ds = P.load_dataset(cfg)
    sub = P.stratified_subsample(ds.train, 0.25, ds.schema.class_names, 3)
    y = ds.labels(sub)
    assert len(sub) == 60 and np.bincount(y).tolist() == [30, 30]
    assert [s.session_id for s in sub] == [s.session_id for s in
                                           P.stratified_subsample(ds.train, 0.25, ds.schema.class_names, 3)]


def test_curve_csv_columns(tmp_path):
    rows = [{"seed": 0, "fraction": 0.1, "pipeline": "pretrained", "accuracy": 0.5, "macro_f1": 0.25}]
    P.write_curve_csv(tmp_path / "c.csv", rows)
    with open(tmp_path / "c.csv") as fh:
        r = list(csv.reader(fh))
    assert r[0][:4] == ["fraction", "pipeline", "accuracy", "macroF1"]


def test_csv_source(tmp_path):
    from laeids.ingest import write_flow_csv
    from laeids.swarm_env import SYNTH_SCHEMA, CorpusConfig, synth_corpus

    write_flow_csv(tmp_path / "flows.csv", synth_corpus(CorpusConfig(120, 120, seed=5)), SYNTH_SCHEMA)
    cfg = P.merge_config({"data": {"source": "csv", "csv_path": str(tmp_path / "flows.csv"), "subset": 150},
                          "image": {"height": 4, "width": 4}}, P.merge_config(SMALL))
    ds = P.load_dataset(cfg)
    assert len(ds.train) + len(ds.test) == 150 and ds.image_cfg.source.value == "tabular_quantized"
    out = P.run_pipeline(cfg, tmp_path / "run")
    assert json.loads((out / "metrics.json").read_text())["n_test"] == len(ds.test)


def test_cli_verbs(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(SMALL))
    c = ["--config", str(cfgp)]
    assert main(["synth", *c, "--out", str(tmp_path / "corpus")]) == 0
    sess = str(tmp_path / "corpus" / "train.jsonl")
    assert main(["pretrain", *c, "--sessions", sess, "--out", str(tmp_path / "m.fmem")]) == 0
    assert main(["build-repo", *c, "--sessions", sess, "--out", str(tmp_path / "r.json")]) == 0
    assert main(["train", *c, "--sessions", sess, "--memory", str(tmp_path / "m.fmem"), "--repository",
                 str(tmp_path / "r.json"), "--out", str(tmp_path / "b.bundle")]) == 0
    assert main(["simulate", *c, "--sessions", str(tmp_path / "corpus" / "test.jsonl"),
                 "--out", str(tmp_path / "s.jsonl")]) == 0
    assert main(["evaluate", *c, "--bundle", str(tmp_path / "b.bundle"), "--memory", str(tmp_path / "m.fmem"),
                 "--sessions", str(tmp_path / "corpus" / "test.jsonl"), "--scenario", str(tmp_path / "s.jsonl"),
                 "--repository", str(tmp_path / "r.json"), "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert report["HEAVY"]["accuracy"] > 0.9 and "scenario" in report
    capsys.readouterr()
    assert main(["model", "inspect", str(tmp_path / "b.bundle")]) == 0
    assert '"schema_digest"' in capsys.readouterr().out
    assert main(["ingest", "--csv", str(tmp_path / "corpus" / "test.csv"), "--out", str(tmp_path / "i.jsonl")]) == 0


def test_cli_error_exit_code(tmp_path, capsys):
    assert main(["ingest", "--csv", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.jsonl")]) == 1
    assert "error:" in capsys.readouterr().err


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "laeids", "--help"], capture_output=True, text=True,
                       env=dict(os.environ), check=True)
    for verb in ("ingest", "synth", "pretrain", "select", "build-repo", "train", "simulate", "evaluate", "curve",
                 "run", "model"):
        assert verb in r.stdout
