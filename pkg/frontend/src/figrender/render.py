"""Figure rendering for ddpclab experiment manifests.

Consumes only the documented artifact formats: `manifest.json` with
role -> {path, sha256} entries and the per-experiment CSV schemas. Rendering
never writes into the experiment directory and is deterministic for fixed
inputs and style options.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURES = ("fig1", "fig2", "fig3", "fig4")


class SchemaError(ValueError):
    """An input file is missing, empty, or lacks a required column."""


@dataclass(frozen=True)
class PlotSpec:
    manifest: Path
    figure: str
    out: Path
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.figure not in FIGURES:
            raise ValueError(f"unknown figure id {self.figure!r}")
        object.__setattr__(self, "manifest", Path(self.manifest))
        object.__setattr__(self, "out", Path(self.out))


def _load_manifest(path: Path) -> dict:
    if not path.exists():
        raise SchemaError(f"manifest not found: {path}")
    return json.loads(path.read_text())


def _artifact(manifest: dict, base: Path, role: str) -> Path:
    try:
        rel = manifest["files"][role]["path"]
    except KeyError as exc:
        raise SchemaError(f"manifest lacks required artifact {role!r}") from exc
    target = base / rel
    if not target.exists():
        raise SchemaError(f"artifact {role!r} missing on disk: {target}")
    return target


def _read_grid(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    if not rows:
        raise SchemaError(f"{path.name}: empty grid")
    return np.array(rows)


def _read_table(path: Path, required: Tuple[str, ...]) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = reader.fieldnames or []
        missing = [col for col in required if col not in names]
        if missing:
            raise SchemaError(f"{path.name}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    return rows


def _finish(fig, title: str):
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def build_fig1(manifest: dict, base: Path, style: dict) -> List[Tuple[str, plt.Figure]]:
    """One heatmap per training mode, sharing a color scale symmetric about 0."""
    grids = {
        mode: _read_grid(_artifact(manifest, base, f"corr_{mode}"))
        for mode in ("open", "closed")
    }
    limit = max(np.abs(g).max() for g in grids.values()) or 1.0
    out = []
    for mode, grid in grids.items():
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        image = ax.imshow(grid, cmap="RdBu_r", vmin=-limit, vmax=limit, aspect="auto")
        ax.set_xlabel("input step")
        ax.set_ylabel("innovation entry")
        ax.set_xticks(range(grid.shape[1]), [str(j + 1) for j in range(grid.shape[1])])
        fig.colorbar(image, ax=ax, label="correlation")
        out.append((mode, _finish(fig, f"innovation/input correlation, {mode} loop")))
    return out


FIG2_STATS = (
    ("sigma_max_subspace", "largest singular value of the empirical bias"),
    ("expected_bias_sq", "expected squared bias"),
)


def build_fig2(manifest: dict, base: Path, style: dict) -> List[Tuple[str, plt.Figure]]:
    """One log-log panel per summary statistic, open vs closed loop curves."""
    rows = _read_table(
        _artifact(manifest, base, "asymptotics"),
        ("mode", "n_cols") + tuple(name for name, _ in FIG2_STATS),
    )
    out = []
    for stat, label in FIG2_STATS:
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        for mode, marker in (("open", "o"), ("closed", "s")):
            series = sorted(
                (int(r["n_cols"]), float(r[stat])) for r in rows if r["mode"] == mode
            )
            if not series:
                raise SchemaError(f"asymptotics.csv: no rows for mode {mode!r}")
            ax.plot(*zip(*series), marker=marker, label=f"{mode} loop")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("Hankel columns N")
        ax.set_ylabel(label)
        ax.legend()
        out.append((stat, _finish(fig, "bias summaries vs data size")))
    return out


FIG3_COLUMNS = ("step", "planned_pos", "planned_vel", "realized_pos", "realized_vel")


def build_fig3(manifest: dict, base: Path, style: dict) -> List[Tuple[str, plt.Figure]]:
    """Six panels: planned (dashed) vs realized (solid) position per method/mode."""
    out = []
    for method in ("spc", "tpc", "ddpc"):
        for mode in ("open", "closed"):
            rows = _read_table(
                _artifact(manifest, base, f"plan_{method}_{mode}"), FIG3_COLUMNS
            )
            steps = [int(r["step"]) for r in rows]
            fig, ax = plt.subplots(figsize=(4.0, 3.2))
            ax.plot(steps, [float(r["planned_pos"]) for r in rows], "--", label="planned")
            ax.plot(steps, [float(r["realized_pos"]) for r in rows], "-", label="realized")
            ax.axhline(1.0, color="gray", lw=0.8, label="reference")
            ax.set_xlabel("step")
            ax.set_ylabel("position")
            ax.legend()
            out.append(
                (f"{method}_{mode}", _finish(fig, f"{method.upper()}, {mode}-loop data"))
            )
    return out


def build_fig4(manifest: dict, base: Path, style: dict) -> List[Tuple[str, plt.Figure]]:
    """Position vs time, one curve per method, one panel per training mode."""
    out = []
    for mode in ("open", "closed"):
        path = _artifact(manifest, base, f"tracking_{mode}")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            names = reader.fieldnames or []
            if "step" not in names or len(names) < 2:
                raise SchemaError(f"{path.name}: expected step plus method columns")
            rows = list(reader)
        if not rows:
            raise SchemaError(f"{path.name}: no data rows")
        steps = [int(r["step"]) for r in rows]
        fig, ax = plt.subplots(figsize=(4.6, 3.4))
        for name in names[1:]:
            ax.plot(steps, [float(r[name]) for r in rows], label=name)
        ax.axhline(1.0, color="gray", lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("position")
        ax.legend(fontsize=7)
        out.append((mode, _finish(fig, f"receding-horizon tracking, {mode}-loop data")))
    return out


_BUILDERS = {
    "fig1": build_fig1,
    "fig2": build_fig2,
    "fig3": build_fig3,
    "fig4": build_fig4,
}


def build_figures(spec: PlotSpec) -> List[Tuple[str, plt.Figure]]:
    manifest = _load_manifest(spec.manifest)
    if manifest.get("experiment") != spec.figure:
        raise SchemaError(
            f"manifest describes {manifest.get('experiment')!r}, not {spec.figure!r}"
        )
    return _BUILDERS[spec.figure](manifest, spec.manifest.parent, spec.style)


def render(spec: PlotSpec) -> List[Path]:
    """Write one image per sub-figure next to `spec.out`; returns the paths.

    Inputs are validated before anything is written, so a schema error leaves
    no partial output behind.
    """
    figures = build_figures(spec)
    spec.out.parent.mkdir(parents=True, exist_ok=True)
    suffix = spec.out.suffix or ".png"
    written = []
    for name, fig in figures:
        target = spec.out.with_name(f"{spec.out.stem}_{name}{suffix}")
        fig.savefig(target, dpi=int(spec.style.get("dpi", 130)))
        plt.close(fig)
        written.append(target)
    return written
