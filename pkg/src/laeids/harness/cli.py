"""``laeids`` command line.

Every verb shares ``--config`` (JSON), ``--seed`` and ``--out``. Intermediate
artifacts are plain files so stages can be run one at a time::

    laeids synth --out corpus/
    laeids pretrain --sessions corpus/train.jsonl --out mem.fmem
    laeids run --config cfg.json --out runs/a
    laeids run --manifest runs/a/manifest.json --out runs/b
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from laeids.bundle import ModelBundle
from laeids.classify import bits_to_mask, mask_to_bits, predict_batch
from laeids.diffusion import load_memory, save_memory
from laeids.errors import LaeidsError
from laeids.harness import pipeline as P
from laeids.harness.metrics import evaluate
from laeids.imaging import ImageConfig, ImageSource, fit_scaler
from laeids.ingest import (FeatureSchema, anonymize, infer_schema, load_flow_records, read_packet_fixture,
                           read_sessions_jsonl, sessionize, write_flow_csv, write_sessions_jsonl)
from laeids.orchestrator import (DetectionPipeline, OrchestratorConfig, build_features, read_events_jsonl,
                                 run_scenario, write_alerts_jsonl, write_events_jsonl)
from laeids.pso_select import KnowledgeRepository
from laeids.swarm_env import SYNTH_SCHEMA, generate_scenario


def _load_config(args) -> dict:
    user = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            user = json.load(fh)
    cfg = P.merge_config(user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _schema(args) -> FeatureSchema:
    if getattr(args, "schema", None):
        with open(args.schema, encoding="utf-8") as fh:
            return FeatureSchema.from_dict(json.load(fh))
    return SYNTH_SCHEMA


def _dataset(args, cfg) -> P.Dataset:
    train = read_sessions_jsonl(args.sessions)
    test = read_sessions_jsonl(args.test) if getattr(args, "test", None) else []
    schema = _schema(args)
    img = cfg["image"]
    source = img["source"] or (ImageSource.PAYLOAD_BYTES.value if train[0].payload else
                               ImageSource.TABULAR_QUANTIZED.value)
    return P.Dataset(schema, train, test, ImageConfig(img["height"], img["width"], ImageSource(source),
                                                      img.get("tabular_fallback", False)))


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_ingest(args, cfg):
    out = _out(args, "sessions.jsonl")
    if args.csv:
        schema = _schema(args) if args.schema else infer_schema(args.csv, args.label_column)
        sessions = load_flow_records(args.csv, schema, args.limit)
        print(f"loaded {len(sessions)} sessions, skipped {sessions.skipped_count} rows", file=sys.stderr)
        if not args.schema:
            with open(out.with_suffix(".schema.json"), "w", encoding="utf-8") as fh:
                json.dump(schema.to_dict(), fh, indent=2)
    elif args.packets:
        sessions = sessionize(read_packet_fixture(args.packets), args.idle_timeout)
        print(f"assembled {len(sessions)} sessions", file=sys.stderr)
    else:
        raise SystemExit("ingest needs --csv or --packets")
    if args.anonymize is not None:
        sessions = [anonymize(s, args.anonymize) for s in sessions]
    write_sessions_jsonl(out, sessions)


def cmd_synth(args, cfg):
    out = _out(args, "corpus")
    out.mkdir(parents=True, exist_ok=True)
    ds = P.load_dataset(P.merge_config({"data": {"source": "synthetic"}}, cfg))
    write_sessions_jsonl(out / "train.jsonl", ds.train)
    write_sessions_jsonl(out / "test.jsonl", ds.test)
    write_flow_csv(out / "train.csv", ds.train, SYNTH_SCHEMA)
    write_flow_csv(out / "test.csv", ds.test, SYNTH_SCHEMA)
    with open(out / "schema.json", "w", encoding="utf-8") as fh:
        json.dump(SYNTH_SCHEMA.to_dict(), fh, indent=2)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test sessions to {out}")


def cmd_pretrain(args, cfg):
    ds = _dataset(args, cfg)
    mem = P.pretrain_memory(ds, fit_scaler(ds.train), cfg)
    save_memory(_out(args, "memory.fmem"), mem)
    losses = mem.provenance["epoch_losses"]
    print(f"pretrained on {mem.provenance['n_images']} images; loss {losses[0]:.4f} -> {losses[-1]:.4f}")


def cmd_select(args, cfg):
    ds = _dataset(args, cfg)
    res = P.run_selection(P.selection_splits(ds, ds.train, cfg, cfg["seed"]), P.selection_config(cfg, cfg["seed"]),
                          P.make_advisor(cfg))
    out = _out(args, "selection.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"mask": mask_to_bits(res.mask), "fitness": res.fitness, "digest": res.digest,
                   "log": [r.to_json() for r in res.log]}, fh, indent=2)
    print(f"mask {mask_to_bits(res.mask)} fitness {res.fitness:.4f}")


def cmd_build_repo(args, cfg):
    ds = _dataset(args, cfg)
    if args.profiles:
        with open(args.profiles, encoding="utf-8") as fh:
            cfg["repository"]["profiles"] = json.load(fh)
    repo = P.build_profile_repository(ds, cfg, P.make_advisor(cfg))
    repo.save(_out(args, "repository.json"))
    for e in repo.entries:
        print(e.entry_id, e.profile.device_class, mask_to_bits(e.mask) if e.mask is not None else e.error)


def cmd_train(args, cfg):
    ds = _dataset(args, cfg)
    scaler = fit_scaler(ds.train)
    memory = load_memory(args.memory) if args.memory else None
    mode = cfg["classify"]["feature_mode"] if memory is not None else "tabular"
    cfg["classify"]["feature_mode"] = mode
    masks = []
    if args.mask:
        masks.append(args.mask)
    if args.repository:
        masks += [mask_to_bits(e.mask) for e in KnowledgeRepository.load(args.repository).usable()]
    if not masks:
        masks = ["1" * ds.schema.n_features]
    pool = P.train_pool(ds, masks, scaler, memory, cfg)
    bundle = ModelBundle(pool, masks[0], scaler, ds.image_cfg, ds.schema.to_dict(), ds.schema.digest(), mode)
    bundle.save(_out(args, "models.bundle"))
    print(json.dumps(bundle.describe(), indent=2))


def cmd_simulate(args, cfg):
    ds = _dataset(args, cfg)
    ds.test = ds.train
    events = generate_scenario(P.scenario_config(cfg, ds, P.default_profiles(cfg, ds.schema.name)))
    write_events_jsonl(_out(args, "scenario.jsonl"), events)
    print(f"wrote {len(events)} events")


def cmd_evaluate(args, cfg):
    bundle = ModelBundle.load(args.bundle)
    memory = load_memory(args.memory) if args.memory else None
    schema = FeatureSchema.from_dict(bundle.schema)
    out = _out(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    report = {}
    if args.sessions:
        sessions = read_sessions_jsonl(args.sessions)
        X = build_features(sessions, bits_to_mask(bundle.default_mask), bundle.feature_mode, bundle.image_cfg,
                           bundle.scaler, memory)
        y = [schema.class_index(s.label) for s in sessions]
        for tier, model in sorted(bundle.pool[bundle.default_mask].items(), key=lambda kv: kv[0].value):
            report[tier.value] = evaluate(predict_batch(model, X).argmax(axis=1), y, schema.class_names).to_json()
    if args.scenario:
        repo = KnowledgeRepository.load(args.repository)
        profiles = P.default_profiles(cfg, schema.name)
        pipe = DetectionPipeline(bundle.image_cfg, bundle.scaler, memory, repo, bundle.pool, bundle.default_mask,
                                 profiles[0], bundle.feature_mode)
        res = run_scenario(read_events_jsonl(args.scenario), pipe,
                           OrchestratorConfig(cfg["scenario"]["theta_isolate"]))
        write_alerts_jsonl(out / "alerts.jsonl", res.alerts)
        report["scenario"] = res.summary
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps({k: v.get("accuracy", v) for k, v in report.items()}, indent=2))


def cmd_curve(args, cfg):
    ds = _dataset(args, cfg)
    if not cfg["curve"]["fractions"]:
        cfg["curve"]["fractions"] = [0.1, 0.5, 1.0]
    rows = P.curve_rows(ds, fit_scaler(ds.train), cfg)
    P.write_curve_csv(_out(args, "curve.csv"), rows)
    for r in rows:
        print(f"{r['seed']}\t{r['fraction']}\t{r['pipeline']}\t{r['accuracy']:.4f}\t{r['macro_f1']:.4f}")


def cmd_run(args, cfg):
    if args.manifest:
        out = P.replay_manifest(args.manifest, _out(args, "runs/replay"))
    else:
        out = P.run_pipeline(cfg, args.out)
    with open(out / "metrics.json", encoding="utf-8") as fh:
        m = json.load(fh)
    print(f"{out}: accuracy {m['accuracy']:.4f} macro F1 {m['macro_f1']:.4f} ({m['primary_tier']}, {m['backend']})")


def cmd_model_inspect(args, cfg):
    bundle = ModelBundle.load(args.bundle)
    print(json.dumps(bundle.describe(), indent=2))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="laeids", parents=[common], description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    def with_sessions(p, required=True):
        p.add_argument("--sessions", required=required, help="sessions JSONL (training split)")
        p.add_argument("--schema", help="schema JSON (defaults to the synthetic schema)")
        return p

    p = verb("ingest", cmd_ingest, "load a flow CSV or packet fixture into sessions JSONL")
    p.add_argument("--csv")
    p.add_argument("--packets")
    p.add_argument("--schema")
    p.add_argument("--label-column", default="label")
    p.add_argument("--limit", type=int)
    p.add_argument("--idle-timeout", type=float, default=64.0)
    p.add_argument("--anonymize", type=int, metavar="K_HDR", help="anonymize, zeroing K_HDR payload bytes")

    verb("synth", cmd_synth, "write the synthetic corpus (train/test JSONL + CSV)")
    with_sessions(verb("pretrain", cmd_pretrain, "pretrain the diffusion feature memory"))
    with_sessions(verb("select", cmd_select, "run advisor-guided PSO feature selection"))
    p = with_sessions(verb("build-repo", cmd_build_repo, "build the device-profile knowledge repository"))
    p.add_argument("--profiles", help="JSON list of {device_class, attributes}")
    p = with_sessions(verb("train", cmd_train, "train the tiered classifier pool into a model bundle"))
    p.add_argument("--memory")
    p.add_argument("--repository")
    p.add_argument("--mask", help="default mask bitstring")
    with_sessions(verb("simulate", cmd_simulate, "generate a swarm scenario replaying the given sessions"))
    p = verb("evaluate", cmd_evaluate, "score a bundle on sessions and/or replay a scenario")
    p.add_argument("--bundle", required=True)
    p.add_argument("--memory")
    p.add_argument("--sessions")
    p.add_argument("--scenario")
    p.add_argument("--repository")
    p = with_sessions(verb("curve", cmd_curve, "label-efficiency curve (curve.csv)"))
    p.add_argument("--test", required=True, help="held-out sessions JSONL")
    p = verb("run", cmd_run, "run the whole offline/online pipeline")
    p.add_argument("--manifest", help="replay a previous run's manifest")
    p = verb("model", None, "model bundle utilities")
    msub = p.add_subparsers(dest="model_verb", required=True)
    pi = msub.add_parser("inspect", parents=[common], help="print bundle digests and tier sizes")
    pi.add_argument("bundle")
    pi.set_defaults(fn=cmd_model_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args, _load_config(args))
    except LaeidsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
