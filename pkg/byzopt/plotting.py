from __future__ import annotations

import math
import re
from pathlib import Path
from typing import Iterable, Optional

from .harness import _ensure_pandas, relative_compression

_TRACE_NAME = re.compile(r"^(?P<name>.+)_gamma(?P<gamma>[^_]+)_seed(?P<seed>\d+)\.csv$")


def _pyplot():
    try:
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("matplotlib is required for plotting") from exc
    return plt


def load_traces(paths: Iterable) -> "object":
    """Concatenate trace CSVs; a directory contributes every ``*_gamma*_seed*.csv`` in it.

    ``name`` and ``gamma`` columns are recovered from the file names.
    """
    pd = _ensure_pandas()
    files = []
    for path in map(Path, paths):
        files.extend(sorted(path.glob("*_gamma*_seed*.csv")) if path.is_dir() else [path])
    frames = []
    for path in files:
        frame = pd.read_csv(path)
        match = _TRACE_NAME.match(path.name)
        frame["name"] = match.group("name") if match else path.stem
        frame["gamma"] = float(match.group("gamma")) if match else math.nan
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["seed", "k", "gap", "name", "gamma"])
    return pd.concat(frames, ignore_index=True)


def gap_band(traces, x: str = "epochs"):
    """Mean optimality gap and its standard error over seeds, one row per round.

    Traces must come from a single run and step size; see ``trace_groups``.
    """
    pd = _ensure_pandas()
    if traces is None or getattr(traces, "empty", True):
        return pd.DataFrame(columns=["k", "mean", "stderr"] if x == "k" else ["k", x, "mean", "stderr"])
    for key in ("name", "gamma"):
        if key in traces and traces[key].nunique() > 1:
            raise ValueError(f"traces mix several values of {key}; band one group at a time")
    clean = traces.replace([math.inf, -math.inf], math.nan).dropna(subset=["gap"])
    aggs = {"mean": ("gap", "mean"), "stderr": ("gap", "sem")}
    if x != "k":
        aggs[x] = (x, "mean")
    band = clean.groupby("k").agg(**aggs).reset_index()
    band["stderr"] = band["stderr"].fillna(0.0)
    return band[["k", "mean", "stderr"]] if x == "k" else band[["k", x, "mean", "stderr"]]


def trace_groups(traces):
    """Split traces into ``(label, frame)`` pairs, one per run name and step size."""
    keys = [key for key in ("name", "gamma") if key in traces]
    if not keys:
        return [(None, traces)]
    groups = []
    for values, frame in traces.groupby(keys, sort=True, dropna=False):
        values = values if isinstance(values, tuple) else (values,)
        tags = dict(zip(keys, values))
        parts = []
        if "name" in tags:
            parts.append(str(tags["name"]))
        gamma = tags.get("gamma")
        if gamma is not None and not (isinstance(gamma, float) and math.isnan(gamma)):
            parts.append(f"γ={gamma:g}")
        groups.append((" ".join(parts) or None, frame))
    return groups


def compression_curve(traces, value_bits: int, d: int, m: float):
    frame = traces.copy()
    frame["relative_compression"] = relative_compression(frame, value_bits, d, m)
    return gap_band(frame, x="relative_compression")


def _draw_band(ax, band, x, label):
    line = ax.plot(band[x], band["mean"], label=label)[0]
    lower = (band["mean"] - band["stderr"]).clip(lower=1e-300)
    ax.fill_between(band[x], lower, band["mean"] + band["stderr"], alpha=0.25, color=line.get_color())
    ax.set_yscale("log")
    ax.set_ylabel("f(x^k) - f*")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()


def _plot_bands(traces, make_band, x, label, ax):
    """Draw one band per trace group; returns the stacked bands and the axes."""
    pd = _ensure_pandas()
    if traces is None or getattr(traces, "empty", True):
        return gap_band(traces, x), ax
    bands = []
    for group_label, frame in trace_groups(traces):
        band = make_band(frame)
        if band.empty:
            continue
        band = band.assign(**{key: frame[key].iloc[0] for key in ("name", "gamma") if key in frame})
        bands.append((group_label, band))
    if not bands:
        return gap_band(None, x), ax
    if ax is None:
        _, ax = _pyplot().subplots(figsize=(8, 5))
    for group_label, band in bands:
        _draw_band(ax, band, x, label or group_label or "optimality gap")
    return pd.concat([band for _, band in bands], ignore_index=True), ax


def plot_optimality_gap(traces, x: str = "epochs", label: Optional[str] = None, show=True, ax=None):
    band, ax = _plot_bands(traces, lambda frame: gap_band(frame, x), x, label, ax)
    if band.empty:
        return band
    plt = _pyplot()
    ax.set_xlabel("epochs" if x == "epochs" else "rounds")
    ax.set_title("Optimality gap (mean ± one standard error over seeds)")
    if show:
        plt.show()
    return band


def plot_relative_compression(traces, value_bits: int, d: int, m: float, label: Optional[str] = None, show=True, ax=None):
    band, ax = _plot_bands(
        traces, lambda frame: compression_curve(frame, value_bits, d, m), "relative_compression", label, ax
    )
    if band.empty:
        return band
    plt = _pyplot()
    ax.set_xlabel("relative communication")
    ax.set_title("Optimality gap against transmitted bits")
    if show:
        plt.show()
    return band
