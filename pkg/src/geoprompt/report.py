"""Metric tables, top-5 match strips and the frozen-layer ablation curve."""

from __future__ import annotations

import csv
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from PIL import Image, ImageOps  # noqa: E402

from .geodata import GeoRecord  # noqa: E402
from .retrieval import RecallReport  # noqa: E402

GREEN = (40, 180, 60)
RED = (210, 40, 40)
GREY = (128, 128, 128)


@contextmanager
def atomic_path(path: str | os.PathLike) -> Iterator[Path]:
    """Yield a sibling temp path; it replaces ``path`` only if the block succeeds."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_metrics(reports: Sequence[RecallReport], path: str | os.PathLike) -> Path:
    with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "n", "radius_m", "recall"])
        for rep in reports:
            if not rep.rankings:
                continue
            for n in rep.thresholds_n:
                w.writerow([rep.dataset, n, f"{rep.positive_radius_m:g}", f"{rep.r_at_n[n]:.6f}"])
    return Path(path)


def render_strip(query: GeoRecord, matches: Sequence[GeoRecord], correct: Sequence[bool],
                 path: str | os.PathLike, tile: int = 96, border: int = 4) -> Path:
    """Query tile (grey frame) followed by the ranked matches framed green or red."""
    tiles = [ImageOps.expand(Image.open(query.path).convert("RGB").resize((tile, tile)),
                             border, GREY)]
    for rec, ok in zip(matches, correct):
        img = Image.open(rec.path).convert("RGB").resize((tile, tile))
        tiles.append(ImageOps.expand(img, border, GREEN if ok else RED))
    side = tile + 2 * border
    strip = Image.new("RGB", (side * len(tiles) + 2 * (len(tiles) - 1), side), (255, 255, 255))
    for i, t in enumerate(tiles):
        strip.paste(t, (i * (side + 2), 0))
    with atomic_path(path) as tmp:
        strip.save(tmp, format="PNG")
    return Path(path)


def render_ablation_curve(reports: Sequence[RecallReport], path: str | os.PathLike) -> Dict:
    pts = sorted((r.frozen_layer_count, r.r_at_n[min(r.r_at_n)], r.trainable_params)
                 for r in reports if r.frozen_layer_count is not None)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    for x, y, n in pts:
        ax.annotate(f"{n} params" if n is not None else "", (x, y), fontsize=7,
                    textcoords="offset points", xytext=(0, 6), ha="center")
    ax.set_xlabel("frozen layers")
    ax.set_ylabel(f"R@{min(reports[0].thresholds_n)}")
    ax.set_xticks(xs)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    with atomic_path(path) as tmp:
        fig.savefig(tmp, dpi=100, format="png")
    plt.close(fig)
    return {"path": Path(path), "points": pts}


def render_report(reports: Sequence[RecallReport], records: Sequence[GeoRecord],
                  out_dir: str | os.PathLike, top: int = 5, strips: bool = True) -> Dict[str, object]:
    """Write ``metrics.csv``, one strip per query of the first report, and with several
    frozen-layer reports an ablation table plus curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[str, object] = {"metrics": write_metrics(reports, out_dir / "metrics.csv")}
    by_id = {r.image_id: r for r in records}
    strip_paths: List[Path] = []
    if strips and reports:
        (out_dir / "strips").mkdir(exist_ok=True)
        rep = reports[0]
        for qid, ranked in rep.rankings.items():
            matches = [by_id[i] for i in ranked[:top]]
            strip_paths.append(render_strip(by_id[qid], matches, rep.correct[qid][:top],
                                            out_dir / "strips" / f"{qid}.png"))
    written["strips"] = strip_paths
    ablation = [r for r in reports if r.frozen_layer_count is not None]
    if len(ablation) > 1:
        table = out_dir / "ablation.csv"
        with atomic_path(table) as tmp, open(tmp, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["frozen_layers", "trainable_params",
                        *[f"r_at_{n}" for n in ablation[0].thresholds_n]])
            for r in sorted(ablation, key=lambda r: r.frozen_layer_count):
                w.writerow([r.frozen_layer_count, r.trainable_params,
                            *[f"{r.r_at_n[n]:.6f}" for n in r.thresholds_n]])
        written["ablation_table"] = table
        written["ablation_curve"] = render_ablation_curve(ablation, out_dir / "ablation_curve.png")
    return written
