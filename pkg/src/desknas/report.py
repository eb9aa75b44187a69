"""Markdown summary of a directory of pipeline artifacts."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .artifacts import read_meta
from .train import TrainLog


class ReportError(ValueError):
    pass


ABLATION_ROWS = [("Baseline", "inplace", "kd"), ("EXP1", "smd", "kd"),
                 ("EXP2", "inplace", "dkd"), ("EXP3", "smd", "dkd")]


def _load(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _mean_std(v) -> str:
    v = np.asarray(v, dtype=float)
    return f"{v.mean():.4f} ± {v.std():.4f}" if len(v) > 1 else f"{v.mean():.4f}"


def collect(run_dir: Path) -> dict:
    found = {"train": [], "consistency": [], "surrogate": [], "search": [], "hashes": {}}
    for path in sorted(run_dir.rglob("*")):
        if path.suffix not in (".json", ".csv") or not path.is_file():
            continue
        meta = read_meta(path)
        if not meta or meta.get("tool") != "desknas":
            continue
        found["hashes"].setdefault(meta.get("space_hash"), []).append(path)
        if path.name == "train_log.csv":
            found["train"].append((path, meta, TrainLog.from_csv(path)))
        elif path.name == "consistency.json":
            found["consistency"].append((path, _load(path)))
        elif path.name == "surrogate_report.json":
            found["surrogate"].append((path, _load(path)))
        elif path.name == "pareto.json":
            found["search"].append((path, _load(path)))
    return found


def build_report(run_dir: str | Path) -> str:
    run_dir = Path(run_dir)
    found = collect(run_dir)
    if not found["hashes"]:
        raise ReportError(f"{run_dir}: no desknas artifacts found")
    if len(found["hashes"]) > 1:
        detail = "; ".join(f"{h}: {len(ps)} files (e.g. {ps[0]})" for h, ps in found["hashes"].items())
        raise ReportError(f"artifacts come from different search spaces: {detail}")
    (h,) = found["hashes"]
    lines = [f"# Run report: {run_dir}", "", f"Space hash `{h}`.", ""]

    if found["train"]:
        lines += ["## Pretraining", "", "| run | mode | loss | seed | epochs | min acc | max acc |",
                  "|---|---|---|---|---|---|---|"]
        groups: dict[tuple, list] = {}
        for path, meta, tlog in found["train"]:
            tc = meta.get("train", {})
            last = tlog.rows[-1] if tlog.rows else {"min_acc": float("nan"), "max_acc": float("nan")}
            key = (tc.get("distill_mode"), tc.get("distill_loss"))
            groups.setdefault(key, []).append(last)
            lines.append(f"| {path.parent.relative_to(run_dir)} | {key[0]} | {key[1]} | "
                         f"{meta.get('seed')} | {len(tlog.rows)} | {last['min_acc']:.4f} | "
                         f"{last['max_acc']:.4f} |")
        lines.append("")
        present = [r for r in ABLATION_ROWS if (r[1], r[2]) in groups]
        if ("inplace", "kd") in groups and len(present) > 1:
            base = np.mean([r["min_acc"] for r in groups[("inplace", "kd")]])
            lines += ["### Ablation", "", "| setting | SMD | DKD | runs | min acc | max acc | "
                      "min vs baseline |", "|---|---|---|---|---|---|---|"]
            for name, mode, loss in present:
                rs = groups[(mode, loss)]
                mins = [r["min_acc"] for r in rs]
                lines.append(f"| {name} | {'✓' if mode == 'smd' else ''} | "
                             f"{'✓' if loss == 'dkd' else ''} | {len(rs)} | {_mean_std(mins)} | "
                             f"{_mean_std([r['max_acc'] for r in rs])} | "
                             f"{100 * (np.mean(mins) - base):+.2f} pts |")
            lines.append("")

    for path, doc in found["consistency"]:
        s = doc["summary"]
        lines += ["## Inherited vs finetuned accuracy", "",
                  f"{s['n']} architectures ({path.parent.relative_to(run_dir)}): "
                  f"RMSE {s['rmse']:.4f}" + (f", Spearman {s['rho']:.3f}, Kendall {s['tau']:.3f}"
                                             if "rho" in s else ""), ""]

    for path, doc in found["surrogate"]:
        lines += ["## Latency surrogates", "", "| device | kind | rho | tau | rmse (ms) |",
                  "|---|---|---|---|---|"]
        for dev, r in doc["devices"].items():
            lines.append(f"| {dev} | {r['kind']} | {r['rho']:.4f} | {r['tau']:.4f} | {r['rmse']:.4f} |")
        lines.append("")
        for dev, r in doc["devices"].items():
            if "sweep" in r:
                lines += [f"Sample efficiency on {dev} (mean ± std Spearman):", "",
                          "| kind | size | rho |", "|---|---|---|"]
                for row in r["sweep"]:
                    lines.append(f"| {row['kind']} | {row['size']} | "
                                 f"{row['rho_mean']:.4f} ± {row['rho_std']:.4f} |")
                lines.append("")

    for path, doc in found["search"]:
        sc = doc["meta"].get("search", {})
        front = doc["front"]
        lines += [f"## Search ({path.parent.relative_to(run_dir)})", "",
                  f"Objective {sc.get('objective')}, device {sc.get('device')}, "
                  f"P={sc.get('population')}, K={sc.get('top_k')}, T={sc.get('generations')}; "
                  f"{doc.get('n_evaluated')} architectures evaluated; front of {len(front)}.", "",
                  "| accuracy | predicted ms | simulated ms | MFLOPs |", "|---|---|---|---|"]
        for r in front:
            pred = "" if r["predicted_latency_ms"] is None else f"{r['predicted_latency_ms']:.3f}"
            ver = "" if r["verified_latency_ms"] is None else f"{r['verified_latency_ms']:.3f}"
            lines.append(f"| {r['accuracy']:.4f} | {pred} | {ver} | {r['flops'] / 1e6:.3f} |")
        v = doc.get("verification", {})
        if "mae_ms" in v:
            lines += ["", f"Surrogate error on the front: MAE {v['mae_ms']:.4f} ms, "
                          f"max relative {v['max_rel_err']:.3%}."]
        lines.append("")
    return "\n".join(lines)
