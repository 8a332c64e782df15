"""Offline + online pipeline driven by one JSON config.

Offline: load data, fit the scaler, render images, pretrain the denoiser,
select features (global mask and one repository entry per device profile),
train every tier for every distinct mask. Online: generate a swarm scenario
from held-out sessions, replay it through the orchestrator and score the
verdicts. The run directory's manifest embeds the resolved config, so a run
can be replayed exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

import laeids
from laeids import _accel
from laeids.advisor import LlmAdvisor, RemoteAdvisorConfig, RuleAdvisor
from laeids.bundle import ModelBundle
from laeids.classify import Tier, bits_to_mask, mask_to_bits, predict_batch, tier_config, train_tier
from laeids.diffusion import FeatureMemory, PretrainConfig, pretrain, save_memory
from laeids.errors import InfeasibleFraction, StageError
from laeids.harness.metrics import evaluate
from laeids.imaging import ImageConfig, ImageSource, ScalerStats, fit_scaler, sessions_to_matrix
from laeids.ingest import FeatureSchema, load_flow_records, infer_schema
from laeids.orchestrator import (DetectionPipeline, OrchestratorConfig, build_features, run_scenario,
                                 write_alerts_jsonl, write_events_jsonl)
from laeids.pso_select import (DatasetSplits, DeviceProfile, KnowledgeRepository, SelectionConfig, PsoParams,
                               build_repository, run_selection, stratified_split)
from laeids.swarm_env import DEFAULT_PROFILES, SYNTH_SCHEMA, CorpusConfig, SimConfig, generate_scenario, synth_corpus

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "deterministic": True,
    "data": {
        "source": "synthetic",  # or "csv"
        "n_train": 2000,
        "n_test": 1000,
        "noise_amplitude": 8,
        "noise_rate": 0.15,
        "csv_path": None,
        "schema": None,  # FeatureSchema dict; inferred from the CSV header when absent
        "label_column": "label",
        "subset": 5000,  # stratified subset size for CSV input
        "test_fraction": 1 / 3,
    },
    "image": {"height": 32, "width": 32, "source": None, "tabular_fallback": False},
    "diffusion": {"epochs": 30, "batch_size": 32, "learning_rate": 1e-3, "T": 50, "beta_start": 1e-4,
                  "beta_end": 0.02, "hidden": [256, 64], "dtype": "float64", "pretrain_on": "benign"},
    "selection": {"particles": 20, "epochs": 30, "penalty": 0.05, "val_fraction": 0.3,
                  "w": 0.7, "c1": 1.5, "c2": 1.5, "v_max": 4.0, "advisor": {"kind": "rule"}},
    "repository": {"profiles": None, "sample_fraction": 0.6},
    "classify": {"feature_mode": "concat", "forest": False, "primary_tier": "HEAVY"},
    "scenario": {"n_nodes": 5, "steps": 50, "join_prob": 0.05, "leave_prob": 0.03, "traffic_prob": 0.4,
                 "resource_prob": 0.2, "attack_mix": {"malicious": 0.3}, "hostile_intensity": 0.8,
                 "batch_size": 6, "theta_isolate": 0.5},
    "curve": {"fractions": [], "seeds": [0], "tier": "MEDIUM"},
}


def merge_config(user: Optional[dict], base: dict = DEFAULT_CONFIG) -> dict:
    out = copy.deepcopy(base)
    for k, v in (user or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(v, out[k])
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _dump(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stratified_subsample(sessions, fraction: float, class_names, seed) -> list:
    """Keep ``round(fraction * n_c)`` sessions of every class (at least one), original order preserved."""
    if not 0.0 < fraction <= 1.0:
        raise InfeasibleFraction(f"fraction {fraction} outside (0, 1]")
    rng = np.random.default_rng(seed)
    keep = []
    labels = np.array([s.label for s in sessions])
    for c in class_names:
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        k = int(round(fraction * idx.size))
        if k < 1:
            raise InfeasibleFraction(f"fraction {fraction} leaves no sample of class {c!r}")
        keep.extend(rng.permutation(idx)[:k].tolist())
    return [sessions[i] for i in sorted(keep)]


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    schema: FeatureSchema
    train: list
    test: list
    image_cfg: ImageConfig

    def labels(self, sessions) -> np.ndarray:
        return np.array([self.schema.class_index(s.label) for s in sessions], dtype=np.int64)

    def tabular(self, sessions) -> np.ndarray:
        return np.vstack([s.tabular_features for s in sessions])


def load_dataset(cfg: dict) -> Dataset:
    d = cfg["data"]
    seed = cfg["seed"]
    img = cfg["image"]
    if d["source"] == "synthetic":
        n = d["n_train"] + d["n_test"]
        L = img["height"] * img["width"]
        corpus = synth_corpus(CorpusConfig(n // 2, n - n // 2, L, seed, noise_amplitude=d["noise_amplitude"],
                                           noise_rate=d["noise_rate"]))
        schema = SYNTH_SCHEMA
        train, test = corpus[:d["n_train"]], corpus[d["n_train"]:]
        source = img["source"] or ImageSource.PAYLOAD_BYTES.value
    elif d["source"] == "csv":
        path = d["csv_path"]
        schema = (FeatureSchema.from_dict(d["schema"]) if d.get("schema")
                  else infer_schema(path, d.get("label_column", "label")))
        rows = load_flow_records(path, schema)
        frac = min(1.0, d["subset"] / len(rows)) if d.get("subset") else 1.0
        rows = stratified_subsample(rows, frac, schema.class_names, seed) if frac < 1.0 else list(rows)
        test_ids = set(s.session_id for s in stratified_subsample(rows, d["test_fraction"], schema.class_names,
                                                                     seed + 1))
        train = [s for s in rows if s.session_id not in test_ids]
        test = [s for s in rows if s.session_id in test_ids]
        source = img["source"] or ImageSource.TABULAR_QUANTIZED.value
    else:
        raise ValueError(f"unknown data source {d['source']!r}")
    image_cfg = ImageConfig(img["height"], img["width"], ImageSource(source), img.get("tabular_fallback", False))
    return Dataset(schema, train, test, image_cfg)


# ---------------------------------------------------------------- offline stages


def pretrain_config(cfg: dict, seed: Optional[int] = None) -> PretrainConfig:
    d = cfg["diffusion"]
    return PretrainConfig(d["epochs"], d["batch_size"], d["learning_rate"], cfg["seed"] if seed is None else seed,
                          d["T"], d["beta_start"], d["beta_end"], tuple(d["hidden"]), d["dtype"])


def pretrain_memory(ds: Dataset, scaler, cfg: dict, seed: Optional[int] = None) -> FeatureMemory:
    pool = ds.train
    if cfg["diffusion"].get("pretrain_on", "benign") == "benign":
        pool = [s for s in ds.train if s.label == ds.schema.benign]
    X = sessions_to_matrix(pool, ds.image_cfg, scaler)
    return pretrain(X.reshape(-1, ds.image_cfg.height, ds.image_cfg.width), pretrain_config(cfg, seed),
                    dataset=ds.schema.name)


def make_advisor(cfg: dict, log_dir: Optional[Path] = None):
    a = cfg["selection"].get("advisor") or {"kind": "rule"}
    if a.get("kind", "rule") == "rule":
        return RuleAdvisor()
    rc = RemoteAdvisorConfig(a["endpoint"], a.get("model", "gpt-4o-mini"), a.get("timeout", 30.0),
                             a.get("max_retries", 2), a.get("api_key_env", "OPENAI_API_KEY"),
                             a.get("backoff_seconds", 0.5), str(log_dir) if log_dir else None)
    return LlmAdvisor(rc)


def selection_config(cfg: dict, seed: int) -> SelectionConfig:
    s = cfg["selection"]
    return SelectionConfig(s["particles"], s["epochs"], s["penalty"], seed,
                           PsoParams(s["w"], s["c1"], s["c2"], s["v_max"]))


def selection_splits(ds: Dataset, sessions, cfg: dict, seed: int) -> DatasetSplits:
    return stratified_split(ds.tabular(sessions), ds.labels(sessions), cfg["selection"]["val_fraction"], seed,
                            ds.schema.class_names)


def default_profiles(cfg: dict, schema_name: str) -> list:
    raw = cfg["repository"].get("profiles")
    if raw:
        return [DeviceProfile.from_json({"schema": schema_name, **p}) for p in raw]
    return [DeviceProfile(p.device_class, p.attributes, schema_name) for p in DEFAULT_PROFILES]


def build_profile_repository(ds: Dataset, cfg: dict, advisor=None) -> KnowledgeRepository:
    profiles = default_profiles(cfg, ds.schema.name)
    datasets = []
    for i, _ in enumerate(profiles):
        sub = stratified_subsample(ds.train, cfg["repository"]["sample_fraction"], ds.schema.class_names,
                                   cfg["seed"] + 100 + i)
        datasets.append(selection_splits(ds, sub, cfg, cfg["seed"] + 100 + i))
    return build_repository(profiles, datasets, selection_config(cfg, cfg["seed"]), advisor, ds.schema.name)


def train_pool(ds: Dataset, masks, scaler, memory, cfg: dict) -> dict:
    y = ds.labels(ds.train)
    mode = cfg["classify"]["feature_mode"]
    phi_dim = memory.feature_dim if (memory is not None and mode != "tabular") else 0
    pool = {}
    for bits in sorted(set(masks)):
        X = build_features(ds.train, bits_to_mask(bits), mode, ds.image_cfg, scaler, memory)
        pool[bits] = {
            t: train_tier(t, X, y, tier_config(t, forest=cfg["classify"]["forest"], seed=cfg["seed"]),
                          ds.schema.class_names, bits_to_mask(bits), phi_dim)
            for t in Tier
        }
    return pool


def holdout_reports(ds: Dataset, bundle: ModelBundle, memory) -> dict:
    y = ds.labels(ds.test)
    X = build_features(ds.test, bits_to_mask(bundle.default_mask), bundle.feature_mode, ds.image_cfg,
                       bundle.scaler, memory)
    out = {}
    for tier, model in sorted(bundle.pool[bundle.default_mask].items(), key=lambda kv: kv[0].value):
        pred = predict_batch(model, X).argmax(axis=1)
        out[tier.value] = evaluate(pred, y, ds.schema.class_names)
    return out


def scenario_config(cfg: dict, ds: Dataset, profiles) -> SimConfig:
    s = {k: v for k, v in cfg["scenario"].items() if k != "theta_isolate"}
    return SimConfig(replay=tuple(ds.test), profiles=tuple(profiles), benign_label=ds.schema.benign,
                     seed=cfg["seed"] + 7, **s)


# ---------------------------------------------------------------- run


class _StageLog:
    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, stage: str, **info):
        # wall-clock times live here only; metrics.json must stay replayable
        self.fh.write(json.dumps({"stage": stage, **info}, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def run_pipeline(cfg: Optional[dict] = None, out_dir=None) -> Path:
    """Execute every stage and return the run directory."""
    cfg = merge_config(cfg)
    out = Path(out_dir or cfg.get("out") or f"runs/run-{config_digest(cfg)}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    _dump(out / "config.json", cfg)
    stages = _StageLog(out / "logs" / "stages.jsonl")

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            stages(name, status="failed", error=f"{type(exc).__name__}: {exc}")
            stages.close()
            raise StageError(name, exc) from exc
        stages(name, status="ok", seconds=round(time.perf_counter() - t0, 3))
        return result

    ds = stage("ingest", lambda: load_dataset(cfg))
    scaler = stage("scaler", lambda: fit_scaler(ds.train))
    mode = cfg["classify"]["feature_mode"]
    memory = None
    if mode != "tabular":
        memory = stage("pretrain", lambda: pretrain_memory(ds, scaler, cfg))
        save_memory(out / "memory.fmem", memory)
        with open(out / "logs" / "pretrain.jsonl", "w", encoding="utf-8") as fh:
            for e, loss in enumerate(memory.provenance["epoch_losses"], start=1):
                fh.write(json.dumps({"epoch": e, "mean_loss": loss}) + "\n")
    advisor = make_advisor(cfg, out / "logs")
    sel = stage("select", lambda: run_selection(selection_splits(ds, ds.train, cfg, cfg["seed"]),
                                                selection_config(cfg, cfg["seed"]), advisor))
    with open(out / "logs" / "selection.jsonl", "w", encoding="utf-8") as fh:
        for rec in sel.log:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    repo = stage("build-repo", lambda: build_profile_repository(ds, cfg, make_advisor(cfg, out / "logs")))
    repo.save(out / "repository.json")
    default_bits = mask_to_bits(sel.mask)
    masks = [default_bits] + [mask_to_bits(e.mask) for e in repo.usable()]
    pool = stage("train", lambda: train_pool(ds, masks, scaler, memory, cfg))
    bundle = ModelBundle(pool, default_bits, scaler, ds.image_cfg, ds.schema.to_dict(), ds.schema.digest(), mode,
                         {"selection_fitness": sel.fitness, "selection_digest": sel.digest})
    bundle.save(out / "models.bundle")

    reports = stage("evaluate-holdout", lambda: holdout_reports(ds, bundle, memory))
    profiles = default_profiles(cfg, ds.schema.name)
    events = stage("simulate", lambda: generate_scenario(scenario_config(cfg, ds, profiles)))
    write_events_jsonl(out / "scenario.jsonl", events)
    pipe = DetectionPipeline(ds.image_cfg, scaler, memory, repo, pool, default_bits,
                             profiles[0], mode)
    res = stage("replay", lambda: run_scenario(events, pipe, OrchestratorConfig(cfg["scenario"]["theta_isolate"])))
    write_alerts_jsonl(out / "alerts.jsonl", res.alerts)
    _dump(out / "latency.json", res.latency_stats())

    scen = [(lab, v.predicted) for _, _, lab, v in res.state.verdicts if lab is not None]
    scenario_report = (evaluate([p for _, p in scen], [ds.schema.class_index(l) for l, _ in scen],
                                ds.schema.class_names).to_json() if scen else None)
    primary = cfg["classify"]["primary_tier"]
    metrics = {
        "config_digest": config_digest(cfg),
        "schema": ds.schema.name,
        "n_train": len(ds.train),
        "n_test": len(ds.test),
        "backend": _accel.backend_name(),
        "mask": default_bits,
        "selection_fitness": sel.fitness,
        "primary_tier": primary,
        "accuracy": reports[primary].accuracy,
        "macro_f1": reports[primary].macro_f1,
        "holdout": {t: r.to_json() for t, r in reports.items()},
        "scenario": {"summary": res.summary, "metrics": scenario_report},
        "comparator_note": "raw-supervised comparator = tier classifier on unmasked tabular features, no pretraining",
    }
    if cfg["curve"]["fractions"]:
        rows = stage("curve", lambda: curve_rows(ds, scaler, cfg))
        write_curve_csv(out / "curve.csv", rows)
        metrics["curve"] = rows
    _dump(out / "metrics.json", metrics)
    stages.close()
    artifacts = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    _dump(out / "manifest.json", {
        "config": cfg,
        "config_digest": config_digest(cfg),
        "seed": cfg["seed"],
        "deterministic": bool(cfg.get("deterministic", True)),
        "backend": _accel.backend_name(),
        "versions": {"laeids": laeids.__version__, "numpy": np.__version__, "python": platform.python_version(),
                     "numba": getattr(_accel.numba, "__version__", None)},
        "artifacts": artifacts,
    })
    return out


def replay_manifest(manifest_path, out_dir) -> Path:
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("backend") and manifest["backend"] != _accel.backend_name():
        log.warning("manifest was produced with the %s backend, replaying with %s",
                    manifest["backend"], _accel.backend_name())
    return run_pipeline(manifest["config"], out_dir)


# ---------------------------------------------------------------- label efficiency


PIPELINES = ("pretrained", "raw-supervised")


def label_efficiency_curve(ds: Dataset, fractions, seed: int, cfg: Optional[dict] = None,
                           memory: Optional[FeatureMemory] = None, scaler: Optional[ScalerStats] = None,
                           tier: str = "MEDIUM") -> dict:
    """Train both pipelines on stratified label budgets and score them on the fixed test split.

    The pretrained pipeline uses the denoiser representations plus a mask
    selected on the subsample itself; the raw-supervised comparator uses the
    same tier on all tabular features. Pretraining consumes unlabeled benign
    traffic only and is shared across fractions.
    """
    cfg = merge_config(cfg)
    scaler = scaler or fit_scaler(ds.train)
    memory = memory or pretrain_memory(ds, scaler, cfg, seed)
    names = ds.schema.class_names
    y_test = ds.labels(ds.test)
    phi_test = memory.features(sessions_to_matrix(ds.test, ds.image_cfg, scaler))
    tab_test = ds.tabular(ds.test)
    t = Tier(tier)
    out = {}
    for frac in fractions:
        sub = stratified_subsample(ds.train, frac, names, seed)
        y = ds.labels(sub)
        tab = ds.tabular(sub)
        counts = np.bincount(y, minlength=len(names))
        if np.all(counts[counts > 0] >= 2) and np.count_nonzero(counts) >= 2:
            mask = run_selection(stratified_split(tab, y, cfg["selection"]["val_fraction"], seed, names),
                                 selection_config(cfg, seed)).mask
        else:
            mask = np.ones(tab.shape[1], dtype=bool)
        phi = memory.features(sessions_to_matrix(sub, ds.image_cfg, scaler))
        Xp = np.hstack([tab[:, mask], phi])
        mp = train_tier(t, Xp, y, tier_config(t, seed=seed), names, mask, phi.shape[1])
        pred = predict_batch(mp, np.hstack([tab_test[:, mask], phi_test])).argmax(axis=1)
        out[(frac, "pretrained")] = evaluate(pred, y_test, names)
        mr = train_tier(t, tab, y, tier_config(t, seed=seed), names)
        out[(frac, "raw-supervised")] = evaluate(predict_batch(mr, tab_test).argmax(axis=1), y_test, names)
    return out


def curve_rows(ds: Dataset, scaler, cfg: dict) -> list:
    rows = []
    for seed in cfg["curve"]["seeds"]:
        table = label_efficiency_curve(ds, cfg["curve"]["fractions"], seed, cfg, scaler=scaler,
                                       tier=cfg["curve"]["tier"])
        for (frac, pipe), rep in table.items():
            rows.append({"seed": seed, "fraction": frac, "pipeline": pipe, "accuracy": rep.accuracy,
                         "macro_f1": rep.macro_f1})
    return rows


def write_curve_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "pipeline", "accuracy", "macroF1", "seed"])
        for r in rows:
            w.writerow([r["fraction"], r["pipeline"], repr(r["accuracy"]), repr(r["macro_f1"]), r["seed"]])
