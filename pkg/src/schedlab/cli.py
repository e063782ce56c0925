"""Command-line entry point binding corpus generation, training,
evaluation, and report emission into reproducible experiment runs."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import corpus as corpus_mod
from . import evaluation as ev
from . import report as report_mod
from .model import ModelConfig
from .serialization import file_sha256
from .trainer import (ScheduleSpec, PhaseSpec, TrainerError, VARIANT_NAMES,
                      available_checkpoints, load_checkpoint, run_schedule,
                      variant_preset)
from .objectives import LossConfig


class ConfigError(Exception):
    pass


def _load_json(path, what="config"):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e


def _write_echo(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))


def _int_list(text):
    return [int(x) for x in str(text).split(",") if x != ""]


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    spec_dict = _load_json(args.spec, "corpus spec")
    kind = spec_dict.pop("kind", "paired")
    spec = corpus_mod.CorpusSpec.from_dict(spec_dict)
    _write_echo(args.out, {"schema_version": 1, "command": "generate-corpus",
                           "kind": kind, "seed": args.seed, "spec": asdict(spec)})
    if kind == "paired":
        c = corpus_mod.generate_corpus(spec, args.seed)
    elif kind == "abx":
        c = corpus_mod.generate_abx_corpus(spec, args.seed)
    else:
        raise ConfigError(f"config key 'kind' must be 'paired' or 'abx', got {kind!r}")
    corpus_mod.save_corpus(c, args.out)
    print(f"wrote corpus ({kind}, {len(c.utterances)} utterances) to {args.out}")
    return 0


def _resolve_model_config(cfg: dict) -> ModelConfig:
    model = cfg.get("model", {"preset": "toy"})
    if "preset" in model:
        return ModelConfig.preset(model["preset"], **model.get("overrides", {}))
    return ModelConfig.from_dict(model)


def _resolve_schedule(cfg: dict, seed: int) -> ScheduleSpec:
    sched_kw = dict(cfg.get("schedule", {}))
    loss_kw = sched_kw.pop("loss", {})
    phases = sched_kw.pop("phases", None)
    sched_kw["loss"] = LossConfig(**loss_kw)
    if phases is not None:
        return ScheduleSpec(phases=[PhaseSpec(**p) for p in phases], seed=seed,
                            label=cfg.get("variant", ""), **sched_kw)
    variant = cfg.get("variant")
    if not variant:
        raise ConfigError("config key 'variant' (or 'schedule.phases') is required")
    return variant_preset(variant, seed=seed,
                          total_epochs=cfg.get("total_epochs", 70),
                          pretrain_epochs=cfg.get("pretrain_epochs", 20),
                          **sched_kw)


def cmd_train(args):
    cfg = _load_json(args.config)
    if args.variant:
        cfg["variant"] = args.variant
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out_dir"] = args.out
    if "seed" not in cfg:
        raise ConfigError("config key 'seed' is required")
    corpus_dir = cfg.get("corpus_dir")
    if not corpus_dir:
        raise ConfigError("config key 'corpus_dir' is required")
    if not os.path.isdir(corpus_dir):
        raise ConfigError(f"config key 'corpus_dir' does not exist: {corpus_dir}")
    out_dir = cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("config key 'out_dir' is required")
    model_config = _resolve_model_config(cfg)
    schedule = _resolve_schedule(cfg, int(cfg["seed"]))
    corpus = corpus_mod.load_corpus(corpus_dir)
    init_state = None
    if cfg.get("init_checkpoint"):
        run_dir, epoch = cfg["init_checkpoint"]["run_dir"], cfg["init_checkpoint"]["epoch"]
        init_state = load_checkpoint(run_dir, int(epoch))
    run_schedule(schedule, corpus, model_config, out_dir, init_state=init_state)
    print(f"trained {schedule.label or 'schedule'} for {schedule.total_epochs} epochs -> {out_dir}")
    return 0


def cmd_eval_abx(args):
    if not os.path.isdir(args.run):
        raise ConfigError(f"run directory does not exist: {args.run}")
    corpus = corpus_mod.load_corpus(args.corpus)
    epochs = _int_list(args.epochs) if args.epochs else [available_checkpoints(args.run)[-1]]
    state0 = load_checkpoint(args.run, epochs[0])
    layers = (_int_list(args.layers) if args.layers
              else list(range(1, state0.config.n_speech_layers + 1)))
    out_dir = args.out or args.run
    if os.path.abspath(out_dir) != os.path.abspath(args.run):
        # a run dir already carries the training run.json; don't clobber it
        _write_echo(out_dir, {"schema_version": 1, "command": "eval-abx",
                              "run": os.path.abspath(args.run), "layers": layers,
                              "epochs": epochs, "seed": args.seed})
    result = ev.layer_sweep_abx(args.run, corpus, layers, epochs, seed=args.seed)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "abx.csv")
    ev.write_abx_csv(result, csv_path)
    meta = {
        "run_dir": os.path.abspath(args.run),
        "corpus_dir": os.path.abspath(args.corpus),
        "corpus_manifest_sha256": file_sha256(os.path.join(args.corpus, "manifest.json")),
        "epochs": epochs, "layers": layers, "seed": args.seed,
    }
    with open(os.path.join(out_dir, "abx_eval.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))
    for cond in ("within", "across"):
        best = result.best(cond)
        if best:
            print(f"best {cond}: error {best['error']:.4f} "
                  f"(layer {best['layer']}, epoch {best['epoch']})")
    return 0


def cmd_eval_retrieval(args):
    if not os.path.isdir(args.run):
        raise ConfigError(f"run directory does not exist: {args.run}")
    corpus = corpus_mod.load_corpus(args.corpus)
    if not corpus.test_images:
        raise ConfigError("corpus has no test split for retrieval")
    epochs = _int_list(args.epochs) if args.epochs else [available_checkpoints(args.run)[-1]]
    ks = _int_list(args.k) if args.k else [1, 10]
    rows = []
    for epoch in epochs:
        state = load_checkpoint(args.run, epoch)
        audio, images, cap_idx = ev.embed_split(state, corpus, corpus.test_images)
        res = ev.recall_at_k(audio, images, cap_idx, ks)
        for k in ks:
            for direction in ("speech_to_image", "image_to_speech"):
                n_q = res.n_captions if direction == "speech_to_image" else res.n_images
                n_c = res.n_images if direction == "speech_to_image" else res.n_captions
                rows.append({"epoch": epoch, "direction": direction, "k": k,
                             "recall": res.recalls[k][direction],
                             "n_queries": n_q, "n_candidates": n_c})
    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    ev.write_retrieval_csv(rows, os.path.join(out_dir, "retrieval.csv"))
    meta = {
        "run_dir": os.path.abspath(args.run),
        "corpus_dir": os.path.abspath(args.corpus),
        "corpus_manifest_sha256": file_sha256(os.path.join(args.corpus, "manifest.json")),
        "epochs": epochs, "k": ks,
    }
    with open(os.path.join(out_dir, "retrieval_eval.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))
    for r in rows:
        print(f"epoch {r['epoch']} {r['direction']} r@{r['k']}: {r['recall']:.4f}")
    return 0


def cmd_report(args):
    if not os.path.isdir(args.root):
        raise ConfigError(f"root directory does not exist: {args.root}")
    report = report_mod.build_report(args.root, args.out)
    print(f"report covers {len(report['variants'])} run(s) -> {args.out}/report.json")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schedlab",
                                description="Multi-task speech representation lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-corpus", help="generate a synthetic corpus")
    g.add_argument("--spec", required=True, help="corpus spec JSON")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one schedule variant")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--variant", help=f"one of: {', '.join(VARIANT_NAMES)}")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("eval-abx", help="per-layer ABX over checkpoints")
    a.add_argument("--run", required=True, help="training run directory")
    a.add_argument("--corpus", required=True, help="audio-only corpus directory")
    a.add_argument("--layers", help="comma-separated layer indices")
    a.add_argument("--epochs", help="comma-separated checkpoint epochs")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_eval_abx)

    r = sub.add_parser("eval-retrieval", help="cross-modal recall@k")
    r.add_argument("--run", required=True)
    r.add_argument("--corpus", required=True, help="paired corpus directory")
    r.add_argument("--epochs", help="comma-separated checkpoint epochs")
    r.add_argument("--k", help="comma-separated k values (default 1,10)")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_eval_retrieval)

    rep = sub.add_parser("report", help="merge run artifacts into report.json")
    rep.add_argument("--root", required=True, help="directory containing run dirs")
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TrainerError, corpus_mod.CorpusError, ev.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
