"""Reports and figures derived from a persisted detection file.

Everything here is a pure function of eval/detections.jsonl: running
`generate` twice over the same file writes byte-identical outputs, so
reports can be regenerated without touching models or data. Floats are
written with fixed precision and figures carry no timestamps.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import transport
from .evaluate import Detection, aggregate_matches, categorize_targets, match_detections
from .types import OrientedBox

# payload table: paper-scale grids ride along with the run's own grid
SIZE_TABLE_CT = (1, 2, 4, 8, 16, 32, 64)
SIZE_TABLE_GRIDS = ((52, 52), (104, 104))


def load_detections(path) -> tuple[dict, list[dict]]:
    header = None
    frames = []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if row.get("kind") == "header":
                header = row
            elif row.get("kind") == "frame":
                frames.append(row)
    if header is None:
        raise ValueError(f"{path} has no header line")
    if len(frames) != header["frames"]:
        raise ValueError(f"{path} holds {len(frames)} frames, header says {header['frames']}")
    return header, frames


def _box(row: dict) -> OrientedBox:
    return OrientedBox(row["cx"], row["cy"], row["w"], row["l"], row["yaw"])


def _dets(frame: dict, key: str) -> list[Detection]:
    return [Detection(_box(r), r["conf"]) for r in frame["runs"][key]]


def _gts(frame: dict) -> tuple[list[OrientedBox], list[bool]]:
    """In-range ground truth boxes and their occlusion flags."""
    boxes, occluded = [], []
    for row in frame["gt"]:
        if row["in_range"]:
            boxes.append(_box(row))
            occluded.append(bool(row["occluded"]))
    return boxes, occluded


def compute_metrics(header: dict, frames: list[dict]) -> dict:
    """Pooled scores per model, category breakdowns, transport stats."""
    iou_thr = header["iou_threshold"]
    sweep = header["iou_sweep"]
    gt_frames = []
    occ_frames = []
    cat_frames = {}
    for c_t in header["ct"]:
        cat_frames[c_t] = []
    for frame in frames:
        boxes, occluded = _gts(frame)
        gt_frames.append(boxes)
        occ_frames.append(occluded)
        for c_t in header["ct"]:
            cat_frames[c_t].append(categorize_targets(
                boxes,
                _dets(frame, f"baseline_c{c_t}_ego"),
                _dets(frame, f"baseline_c{c_t}_coop"),
                iou_thr,
            ))

    out: dict = {"frames": len(frames), "models": {}}
    for c_t in header["ct"]:
        for role, key in (("baseline", f"baseline_c{c_t}_ego"), ("coop", f"coop_c{c_t}")):
            det_frames = [_dets(f, key) for f in frames]
            precision, recall, results = aggregate_matches(det_frames, gt_frames, iou_thr)
            tp = sum(r.tp for r in results)
            fp = sum(r.fp for r in results)
            fn = sum(r.fn for r in results)

            subsets = {name: [0, 0] for name in ("all", "cat0", "cat1", "cat2", "occluded")}
            for res, cats, occs in zip(results, cat_frames[c_t], occ_frames):
                for g, matched in enumerate(res.gt_matched):
                    names = ["all", f"cat{cats[g]}"]
                    if occs[g]:
                        names.append("occluded")
                    for name in names:
                        subsets[name][0] += 1
                        subsets[name][1] += int(matched)
            subset_rows = {
                name: {
                    "targets": total,
                    "matched": hit,
                    "recall": (hit / total) if total else None,
                }
                for name, (total, hit) in subsets.items()
            }

            sweep_rows = []
            for thr in sweep:
                p, r, _ = aggregate_matches(det_frames, gt_frames, thr)
                sweep_rows.append({"iou": thr, "precision": p, "recall": r})

            entry = {
                "role": role, "c_t": c_t,
                "tp": tp, "fp": fp, "fn": fn,
                "precision": precision, "recall": recall,
                "subsets": subset_rows, "sweep": sweep_rows,
            }
            if role == "coop":
                rows = [f["transport"][key] for f in frames]
                delivered = [r["latency_ms"] for r in rows if not r["dropped"]]
                entry["transport"] = {
                    "message_bytes": rows[0]["bytes"] if rows else 0,
                    "dropped": sum(1 for r in rows if r["dropped"]),
                    "mean_latency_ms": float(np.mean(delivered)) if delivered else None,
                }
            out["models"][f"{role}_c{c_t}"] = entry
    return out


def _f(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _write_summary(path: Path, header: dict, metrics: dict) -> None:
    lines = [f"# config={header['config_hash']}",
             "model,c_t,frames,tp,fp,fn,precision,recall,message_bytes,dropped_frames"]
    for name, m in metrics["models"].items():
        t = m.get("transport", {})
        lines.append(
            f"{m['role']},{m['c_t']},{metrics['frames']},{m['tp']},{m['fp']},{m['fn']},"
            f"{_f(m['precision'])},{_f(m['recall'])},"
            f"{t.get('message_bytes', '')},{t.get('dropped', '')}"
        )
    path.write_text("\n".join(lines) + "\n")


def _write_categories(path: Path, header: dict, metrics: dict) -> None:
    lines = [f"# config={header['config_hash']}",
             "model,c_t,subset,targets,matched,recall"]
    for m in metrics["models"].values():
        for subset, row in m["subsets"].items():
            lines.append(
                f"{m['role']},{m['c_t']},{subset},{row['targets']},{row['matched']},"
                f"{_f(row['recall'])}"
            )
    path.write_text("\n".join(lines) + "\n")


def _write_pr_iou(path: Path, header: dict, metrics: dict) -> None:
    lines = [f"# config={header['config_hash']}",
             "model,c_t,iou,precision,recall"]
    for m in metrics["models"].values():
        for row in m["sweep"]:
            lines.append(
                f"{m['role']},{m['c_t']},{row['iou']:.2f},"
                f"{_f(row['precision'])},{_f(row['recall'])}"
            )
    path.write_text("\n".join(lines) + "\n")


def _write_sizes(path: Path, header: dict) -> None:
    cells = header["cells"]
    grids = [("run", cells, cells)] + [
        (f"{h}x{w}", h, w) for h, w in SIZE_TABLE_GRIDS
    ]
    cts = sorted(set(SIZE_TABLE_CT) | set(header["ct"]))
    lines = [f"# config={header['config_hash']}",
             "grid,h_f,w_f,c_t,dtype,payload_bytes,message_bytes"]
    for label, h, w in grids:
        for c_t in cts:
            for dtype in ("f32", "f16", "q8"):
                payload = transport.payload_size(h, w, c_t, dtype)
                lines.append(
                    f"{label},{h},{w},{c_t},{dtype},{payload},"
                    f"{payload + transport.WIRE_OVERHEAD}"
                )
    path.write_text("\n".join(lines) + "\n")


def _write_text_report(path: Path, header: dict, metrics: dict) -> None:
    w = []
    w.append(
        f"detection report  config={header['config_hash']}  preset={header['preset']}  "
        f"frames={metrics['frames']}"
    )
    w.append(
        f"match iou={header['iou_threshold']:.2f}  conf={header['conf_threshold']:.2f}  "
        f"nms iou={header['nms_iou']:.2f}  message dtype={header['message_dtype']}"
    )
    w.append("")
    w.append(f"{'model':<10} {'c_t':>4} {'precision':>10} {'recall':>8} {'tp':>5} {'fp':>5} {'fn':>5}")
    for m in metrics["models"].values():
        w.append(
            f"{m['role']:<10} {m['c_t']:>4} {m['precision']:>10.4f} {m['recall']:>8.4f} "
            f"{m['tp']:>5} {m['fp']:>5} {m['fn']:>5}"
        )
    w.append("")
    w.append("recall by target visibility (cat N = seen by N single-view runs)")
    names = ("cat0", "cat1", "cat2", "occluded")
    first = next(iter(metrics["models"].values()))
    counts = "  ".join(f"{n}={first['subsets'][n]['targets']}" for n in names)
    w.append(f"targets: {counts}")
    w.append(f"{'model':<10} {'c_t':>4} " + " ".join(f"{n:>9}" for n in names))
    for m in metrics["models"].values():
        cells = []
        for n in names:
            r = m["subsets"][n]["recall"]
            cells.append(f"{'-':>9}" if r is None else f"{r:>9.4f}")
        w.append(f"{m['role']:<10} {m['c_t']:>4} " + " ".join(cells))
    w.append("")
    w.append("transport")
    for m in metrics["models"].values():
        t = m.get("transport")
        if not t:
            continue
        lat = "-" if t["mean_latency_ms"] is None else f"{t['mean_latency_ms']:.2f} ms"
        w.append(
            f"coop c_t={m['c_t']}: {t['message_bytes']} B per message, "
            f"mean latency {lat}, dropped {t['dropped']}/{metrics['frames']}"
        )
    w.append("")
    w.append("feature payload bytes (f32)")
    cells = header["cells"]
    w.append(f"{'c_t':>4} {f'{cells}x{cells}':>12} {'52x52':>12} {'104x104':>12}")
    for c_t in sorted(set(SIZE_TABLE_CT) | set(header["ct"])):
        row = [transport.payload_size(h, w, c_t) for h, w in
               ((cells, cells), (52, 52), (104, 104))]
        w.append(f"{c_t:>4} " + " ".join(f"{v:>12}" for v in row))
    path.write_text("\n".join(w) + "\n")


def _save(fig, path: Path, header: dict) -> None:
    fig.savefig(path, metadata={"Software": f"fscod {header['config_hash']}"})
    plt.close(fig)


def render_figures(fig_dir: Path, header: dict, metrics: dict) -> list[Path]:
    fig_dir.mkdir(parents=True, exist_ok=True)
    models = metrics["models"]
    cts = header["ct"]
    paths = []

    fig, ax = plt.subplots(figsize=(5.5, 4), dpi=120)
    for role, style in (("baseline", "--o"), ("coop", "-s")):
        ps = [models[f"{role}_c{c}"]["precision"] for c in cts]
        rs = [models[f"{role}_c{c}"]["recall"] for c in cts]
        ax.plot(cts, ps, style, label=f"{role} precision")
        ax.plot(cts, rs, style.replace("o", "^").replace("s", "v"), label=f"{role} recall")
    ax.set_xlabel("transmitted channels C_t")
    ax.set_ylabel("score")
    ax.set_xscale("log", base=2)
    ax.set_xticks(list(cts))
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title("detection vs transmitted channels")
    p = fig_dir / "fig_pr_vs_ct.png"
    _save(fig, p, header)
    paths.append(p)

    names = ("cat0", "cat1", "cat2", "occluded")
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    keys = list(models)
    width = 0.8 / len(keys)
    xs = np.arange(len(names))
    for i, key in enumerate(keys):
        vals = [models[key]["subsets"][n]["recall"] or 0.0 for n in names]
        ax.bar(xs + i * width, vals, width, label=key)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(names)
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title("recall by target visibility")
    p = fig_dir / "fig_category_recall.png"
    _save(fig, p, header)
    paths.append(p)

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5), dpi=120, sharex=True)
    for key, m in models.items():
        thr = [r["iou"] for r in m["sweep"]]
        axes[0].plot(thr, [r["precision"] for r in m["sweep"]], "-o", ms=3, label=key)
        axes[1].plot(thr, [r["recall"] for r in m["sweep"]], "-o", ms=3, label=key)
    for ax, what in zip(axes, ("precision", "recall")):
        ax.set_xlabel("match IoU threshold")
        ax.set_ylabel(what)
        ax.set_ylim(0, 1.05)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=7)
    fig.suptitle("score vs match strictness")
    fig.tight_layout()
    p = fig_dir / "fig_pr_vs_iou.png"
    _save(fig, p, header)
    paths.append(p)
    return paths


def generate(eval_dir) -> dict:
    """Write every report next to detections.jsonl; returns the metrics."""
    eval_dir = Path(eval_dir)
    header, frames = load_detections(eval_dir / "detections.jsonl")
    metrics = compute_metrics(header, frames)
    _write_summary(eval_dir / "summary.csv", header, metrics)
    _write_categories(eval_dir / "categories.csv", header, metrics)
    _write_pr_iou(eval_dir / "pr_iou.csv", header, metrics)
    _write_sizes(eval_dir / "sizes.csv", header)
    _write_text_report(eval_dir / "report.txt", header, metrics)
    render_figures(eval_dir / "figures", header, metrics)
    return metrics
