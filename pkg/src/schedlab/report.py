"""Merge run directories (training logs, retrieval/ABX CSVs) into a
single report.json plus per-table CSVs."""
from __future__ import annotations

import csv
import json
import os

from .serialization import file_sha256


def _read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(f))


def collect_run(run_dir) -> dict | None:
    run_json = os.path.join(run_dir, "run.json")
    if not os.path.isfile(run_json):
        return None
    with open(run_json, encoding="utf-8") as f:
        run_cfg = json.load(f)
    entry: dict = {
        "run_dir": os.path.abspath(run_dir),
        "variant": run_cfg.get("schedule", {}).get("label") or run_cfg.get("variant", ""),
        "config": run_cfg,
        "hashes": {},
    }
    log_path = os.path.join(run_dir, "train_log.csv")
    if os.path.isfile(log_path):
        entry["train_log"] = _read_csv(log_path)
        entry["hashes"]["train_log.csv"] = file_sha256(log_path)
    for name in ("retrieval.csv", "abx.csv"):
        path = os.path.join(run_dir, name)
        if os.path.isfile(path):
            entry[name.split(".")[0]] = _read_csv(path)
            entry["hashes"][name] = file_sha256(path)
        meta = os.path.join(run_dir, name.replace(".csv", "_eval.json"))
        if os.path.isfile(meta):
            with open(meta, encoding="utf-8") as f:
                entry.setdefault("eval_meta", {})[name] = json.load(f)
    ckpts = {}
    for d in sorted(os.listdir(run_dir)):
        mj = os.path.join(run_dir, d, "model.json")
        if d.startswith("ckpt_") and os.path.isfile(mj):
            with open(mj, encoding="utf-8") as f:
                ckpts[d] = json.load(f)["params_sha256"]
    entry["hashes"]["checkpoints"] = ckpts
    return entry


def _best_abx(rows):
    best = {}
    for r in rows:
        cond = r["condition"]
        err = float(r["error"])
        cur = best.get(cond)
        if cur is None or err < cur["error"]:
            best[cond] = {"error": err, "layer": int(r["layer"]), "epoch": int(r["epoch"])}
    return best


def build_report(root_dir, out_dir) -> dict:
    """Scan ``root_dir`` for run directories and write report.json plus
    merged retrieval/ABX/loss CSV tables into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    runs = []
    for name in sorted(os.listdir(root_dir)):
        path = os.path.join(root_dir, name)
        if os.path.isdir(path):
            entry = collect_run(path)
            if entry:
                runs.append(entry)
    if os.path.isfile(os.path.join(root_dir, "run.json")):
        entry = collect_run(root_dir)
        if entry:
            runs.append(entry)

    report = {"schema_version": 1, "variants": {}}
    retrieval_rows = []
    abx_rows = []
    loss_rows = []
    for entry in runs:
        variant = entry["variant"] or os.path.basename(entry["run_dir"])
        summary = {"run_dir": entry["run_dir"], "hashes": entry["hashes"]}
        if "retrieval" in entry:
            final_rows = entry["retrieval"]
            epochs = [int(r["epoch"]) for r in final_rows if r["epoch"]]
            final_epoch = max(epochs) if epochs else None
            summary["retrieval"] = {
                "final_epoch": final_epoch,
                "rows": final_rows,
            }
            for r in final_rows:
                retrieval_rows.append({"variant": variant, **r})
        if "abx" in entry:
            summary["abx_best"] = _best_abx(entry["abx"])
            for r in entry["abx"]:
                abx_rows.append({"variant": variant, **r})
        if "train_log" in entry:
            for r in entry["train_log"]:
                loss_rows.append({"variant": variant, **r})
        if "eval_meta" in entry:
            summary["eval_meta"] = entry["eval_meta"]
        report["variants"][variant] = summary

    def write_table(name, rows):
        if not rows:
            return
        path = os.path.join(out_dir, name)
        fields = list(rows[0].keys())
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)

    write_table("retrieval_table.csv", retrieval_rows)
    write_table("abx_table.csv", abx_rows)
    write_table("loss_curves.csv", loss_rows)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, separators=(",", ":"))
    return report
