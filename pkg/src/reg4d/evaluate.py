"""Landmark-based accuracy metrics, repeatability, and result exports.

Distances become physical here and nowhere else: voxel-space landmark
differences are multiplied by the grid spacing and reported in mm.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import FieldSet, ImageGroup, LandmarkSet, Volume
from .fields import InversionParams, invert_field, pairwise_field, transport_landmarks, warp

TRE_THRESHOLDS = (1.0, 1.5, 2.0)


@dataclass(frozen=True, eq=False)
class TREStats:
    """Per-landmark errors in mm plus summary statistics.

    ``std`` is the population standard deviation, so the identity
    rmse^2 = mean^2 + std^2 holds exactly; it is asserted on construction.
    ``fraction_below[i]`` is the fraction of landmarks with error under
    TRE_THRESHOLDS[i] mm.
    """

    errors: np.ndarray
    mean: float
    std: float
    rmse: float
    fraction_below: tuple[float, float, float]

    def __post_init__(self):
        e = np.asarray(self.errors, dtype=np.float64)
        e.flags.writeable = False
        object.__setattr__(self, "errors", e)
        if abs(self.rmse ** 2 - (self.mean ** 2 + self.std ** 2)) > 1e-9:
            raise ValueError("rmse^2 must equal mean^2 + variance")

    def as_dict(self) -> dict:
        return {
            "num_landmarks": int(self.errors.size),
            "mean_mm": self.mean,
            "std_mm": self.std,
            "rmse_mm": self.rmse,
            "fraction_below_mm": dict(zip(map(str, TRE_THRESHOLDS), self.fraction_below)),
            "errors_mm": self.errors.tolist(),
        }

    def __str__(self):
        pct = ", ".join(f"<{t}mm: {f * 100:.1f}%"
                        for t, f in zip(TRE_THRESHOLDS, self.fraction_below))
        return (f"TRE {self.mean:.3f} +/- {self.std:.3f} mm "
                f"(rmse {self.rmse:.3f}, n={self.errors.size}, {pct})")


def stats_from_errors(errors) -> TREStats:
    """Summarize a vector of per-landmark errors (mm) as TREStats."""
    e = np.asarray(errors, dtype=np.float64)
    mean = float(e.mean())
    var = float(e.var())
    # derive rmse from the identity so the construction-time assert is
    # immune to two-pass variance rounding
    rmse = float(np.sqrt(mean ** 2 + var))
    frac = tuple(float((e < t).mean()) for t in TRE_THRESHOLDS)
    return TREStats(e, mean, float(np.sqrt(var)), rmse, frac)


def tre(moved: LandmarkSet, reference: LandmarkSet, spacing) -> TREStats:
    """Euclidean distance in mm between corresponding landmark rows."""
    if len(moved) != len(reference):
        raise ValueError(f"landmark counts differ: {len(moved)} vs {len(reference)}")
    if moved.convention != reference.convention:
        raise ValueError("landmark conventions differ")
    diff = (moved.points - reference.points) * np.asarray(spacing, dtype=np.float64)
    return stats_from_errors(np.linalg.norm(diff, axis=1))


def evaluate_registration(
    fieldset: FieldSet,
    source_landmarks: LandmarkSet,
    target_landmarks: LandmarkSet,
    source_phase: int,
    target_phase: int,
    spacing,
    params: InversionParams = InversionParams(),
) -> TREStats:
    """Transport source-phase landmarks through the derived pairwise field
    and measure the distance to the target-phase annotations."""
    pair = pairwise_field(fieldset, source_phase, target_phase, params)
    moved = transport_landmarks(source_landmarks, pair)
    return tre(moved, target_landmarks, spacing)


def repeatability(results, spacing):
    """Spread of repeated runs: distance of every run's landmark position
    to its cross-run mean position, summarized as (mean, std) in mm."""
    if len(results) < 2:
        raise ValueError("repeatability needs at least 2 runs")
    k = len(results[0])
    if any(len(r) != k for r in results):
        raise ValueError("runs have differing landmark counts")
    pos = np.stack([r.points for r in results])  # (R, K, 3)
    center = pos.mean(axis=0, keepdims=True)
    dist = np.linalg.norm((pos - center) * np.asarray(spacing, dtype=np.float64),
                          axis=2)
    return float(dist.mean()), float(dist.std())


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def _write_pgm(path, img8: np.ndarray) -> None:
    h, w = img8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img8.astype(np.uint8).tobytes())


def export_difference_maps(
    group: ImageGroup,
    fieldset: FieldSet,
    template: Volume,
    slice_index: int,
    out_dir,
    axis: int = 0,
    params: InversionParams = InversionParams(),
) -> list:
    """Per-phase intensity difference against the template warped into that
    phase's own space (via the inverted field), sliced and written as
    binary portable graymaps.

    The intensity mapping is linear and shared across phases: value v maps
    to round(127.5 * (1 + v / vmax)) with vmax = max |difference|; 128 is
    zero. The mapping and raw slice values are written alongside so every
    map is numerically recoverable. Returns the image paths (one per phase).
    """
    if group.grid.dims != fieldset.grid.dims:
        raise ValueError("group and fieldset dims differ")
    if not 0 <= axis <= 2:
        raise ValueError("axis must be 0, 1, or 2")
    if not 0 <= slice_index < group.grid.dims[axis]:
        raise ValueError(
            f"slice {slice_index} out of range for axis {axis} "
            f"(dim {group.grid.dims[axis]})"
        )
    os.makedirs(out_dir, exist_ok=True)
    diffs = []
    for vol, fld in zip(group.volumes, fieldset.fields):
        back = invert_field(fld, params)
        warped_template = warp(template, back)
        diffs.append(vol.data - warped_template.data)
    sl = [slice(None)] * 3
    sl[axis] = slice_index
    slices = [d[tuple(sl)] for d in diffs]
    vmax = max(float(np.abs(s).max()) for s in slices) or 1.0

    paths = []
    for label, s in zip(group.phase_labels, slices):
        img8 = np.clip(np.round(127.5 * (1 + s / vmax)), 0, 255)
        path = os.path.join(out_dir, f"diff_{label}.pgm")
        _write_pgm(path, img8)
        np.savetxt(os.path.join(out_dir, f"diff_{label}.tsv"), s,
                   delimiter="\t", fmt="%.6g")
        paths.append(path)
    with open(os.path.join(out_dir, "mapping.json"), "w") as f:
        json.dump({"vmax": vmax, "zero_level": 128, "axis": axis,
                   "slice": slice_index}, f, indent=2)
        f.write("\n")
    return paths


def export_tre_histogram(stats: TREStats, out_png, out_tsv, bin_width: float = 0.5):
    """TRE histogram as an image plus its regenerable numeric companion."""
    edges = np.arange(0.0, float(stats.errors.max()) + bin_width, bin_width)
    if len(edges) < 2:
        edges = np.array([0.0, bin_width])
    counts, edges = np.histogram(stats.errors, bins=edges)
    with open(out_tsv, "w") as f:
        f.write("bin_start_mm\tbin_end_mm\tcount\n")
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            f.write(f"{a:.6g}\t{b:.6g}\t{c}\n")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           edgecolor="black", linewidth=0.5)
    ax.set_xlabel("TRE (mm)")
    ax.set_ylabel("landmarks")
    ax.set_title(f"mean {stats.mean:.2f} mm, rmse {stats.rmse:.2f} mm")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return counts, edges


def plot_loss_trace(trace_path, out_png) -> None:
    """Render a trace TSV (from the optimizer) as loss-vs-iteration curves."""
    rows = np.loadtxt(trace_path, delimiter="\t", skiprows=1, ndmin=2)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(rows[:, 0], rows[:, 1], label="similarity")
    ax.plot(rows[:, 0], rows[:, 4], label="total", alpha=0.7)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


__all__ = [
    "TRE_THRESHOLDS",
    "TREStats",
    "stats_from_errors",
    "tre",
    "evaluate_registration",
    "repeatability",
    "export_difference_maps",
    "export_tre_histogram",
    "plot_loss_trace",
]
