"""Result tables assembled purely from run-directory contents.

``collect`` reads each run's manifest and result file; ``build_tables`` turns
those rows into three fixed-schema tables (self-training pilot, method
comparison, clustering variant) plus a sweep summary when sweep runs are given.
"""

from __future__ import annotations

import csv
from pathlib import Path

from ..errors import InputError
from .metrics import EvalResult
from .runs import RunManifest
from .sweep import read_sweep, summarize

RUN_COLUMNS = ["run", "command", "method", "attack", "trigger", "gamma_labeled", "gamma_unlabeled",
               "pl_scope", "strong_aug", "sa", "asr", "n_clean", "n_attack_eligible"]
PILOT_COLUMNS = ["run", "pl_scope", "gamma_unlabeled", "strong_aug", "sa", "asr"]
COMPARE_COLUMNS = ["run", "method", "attack", "trigger", "gamma_labeled", "gamma_unlabeled", "sa", "asr"]
SWEEP_SUMMARY_COLUMNS = ["run", "augmentation", "repeats", "sa_mean", "asr_mean"]

TABLES = {
    "table1_pilot.csv": PILOT_COLUMNS,
    "table2_comparison.csv": COMPARE_COLUMNS,
    "table3_clustering.csv": COMPARE_COLUMNS,
    "runs.csv": RUN_COLUMNS,
    "sweep_summary.csv": SWEEP_SUMMARY_COLUMNS,
}


def _method(command: str, cfg: dict) -> str:
    if command == "pretrain":
        return "Supervised (poisoned labeled pool)"
    if command == "selftrain":
        aug = cfg.get("selftrain.strong_aug", "none") or "none"
        return "Self-training baseline" if aug == "none" else f"Self-training + {aug}"
    if command == "ssl-selftrain":
        return "Contrastive clustering + self-training"
    return command


def collect(run_dirs) -> list:
    """One record per run directory: manifest plus (when present) its result."""
    records = []
    for d in run_dirs:
        d = Path(d)
        if not d.is_dir():
            raise InputError(f"run directory not found: {d}")
        m = RunManifest.load(d)
        rec = {"dir": d, "manifest": m, "result": None, "sweep": None}
        if (d / "result.json").exists():
            rec["result"] = EvalResult.load(d / "result.json")
        if (d / "sweep.csv").exists():
            rec["sweep"] = read_sweep(d / "sweep.csv")
        records.append(rec)
    return records


def run_row(rec) -> dict:
    m, res = rec["manifest"], rec["result"]
    cfg = m.config
    aug = cfg.get("ssl.strong_aug") if m.command == "ssl-selftrain" else cfg.get("selftrain.strong_aug")
    trained = m.command in ("selftrain", "ssl-selftrain")
    return {
        "run": rec["dir"].name,
        "command": m.command,
        "method": _method(m.command, cfg),
        "attack": cfg.get("poison.attack", ""),
        "trigger": cfg.get("poison.trigger", ""),
        "gamma_labeled": cfg.get("poison.gamma_labeled", ""),
        "gamma_unlabeled": cfg.get("poison.gamma_unlabeled", ""),
        "pl_scope": cfg.get("selftrain.pl_scope", "") if trained else "",
        "strong_aug": (aug or "none") if trained else "",
        "sa": f"{res.sa:.4f}" if res else "",
        "asr": f"{res.asr:.4f}" if res else "",
        "n_clean": res.n_clean if res else "",
        "n_attack_eligible": res.n_attack_eligible if res else "",
    }


def build_tables(records) -> dict:
    rows = [run_row(r) for r in records if r["result"] is not None]
    pick = lambda cols, rs: [{c: r[c] for c in cols} for r in rs]
    sweep_rows = []
    for rec in records:
        if rec["sweep"]:
            for aug, (sa, asr, n) in summarize(rec["sweep"]).items():
                sweep_rows.append({"run": rec["dir"].name, "augmentation": aug, "repeats": n,
                                   "sa_mean": f"{sa:.4f}", "asr_mean": f"{asr:.4f}"})
    return {
        "table1_pilot.csv": pick(PILOT_COLUMNS, [r for r in rows if r["command"] == "selftrain"]),
        "table2_comparison.csv": pick(COMPARE_COLUMNS,
                                      [r for r in rows if r["command"] in ("pretrain", "selftrain")]),
        "table3_clustering.csv": pick(COMPARE_COLUMNS, [r for r in rows if r["command"] in
                                                        ("pretrain", "ssl-selftrain")
                                                        or r["method"] == "Self-training baseline"]),
        "runs.csv": rows,
        "sweep_summary.csv": sweep_rows,
    }


def format_table(rows, columns) -> str:
    if not rows:
        return "(no rows)"
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in columns]
    line = lambda vals: "  ".join(str(v).ljust(w) for v, w in zip(vals, widths)).rstrip()
    out = [line(columns), line("-" * w for w in widths)]
    out += [line(r[c] for c in columns) for r in rows]
    return "\n".join(out)


def render_text(tables: dict) -> str:
    titles = {
        "table1_pilot.csv": "Self-training pilot (pseudo-label scope and unlabeled poisoning)",
        "table2_comparison.csv": "Supervised vs self-training baseline vs strong augmentation",
        "table3_clustering.csv": "Contrastive clustering variant",
        "sweep_summary.csv": "Augmentation sweep (means over repeats)",
    }
    parts = []
    for name, title in titles.items():
        parts.append(f"{title}\n{format_table(tables[name], TABLES[name])}\n")
    return "\n".join(parts)


def write_report(tables: dict, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, columns in TABLES.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            w.writeheader()
            w.writerows(tables[name])
    (out / "report.txt").write_text(render_text(tables))
    return out


def report(run_dirs, out=None) -> dict:
    tables = build_tables(collect(run_dirs))
    if out is not None:
        write_report(tables, out)
    return tables
