"""
Figures and documents built from an experiment's tables: NEES traces with
their chi-square band, per-axis errors against 3-sigma envelopes, RPE
boxes, an interactive trajectory plot, the Excel summary and an optional
PDF report.
"""

import logging
import os
import tempfile
from datetime import date

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import plotly.graph_objects as go  # noqa: E402
from fpdf import FPDF  # noqa: E402

logger = logging.getLogger(__name__)

VARIANT_COLORS = {
    "vio": "#757575",
    "msc-ekf": "#d32f2f",
    "msc-s-ekf": "#ffb300",
    "msc-ikf": "#388e3c",
    "msoc-s-ikf": "#1565c0",
}
AXES = ["theta_x", "theta_y", "theta_z", "p_x", "p_y", "p_z"]
AXIS_LABELS = {"theta_x": "roll err (deg)", "theta_y": "pitch err (deg)", "theta_z": "yaw err (deg)",
               "p_x": "x err (m)", "p_y": "y err (m)", "p_z": "z err (m)"}
SUMMARY_COLUMNS = ["variant", "variable", "rmse_orientation_deg", "rmse_position_m", "rmse_position_se_m",
                   "nees_orientation", "nees_position", "nees_pose",
                   "ate_orientation_deg", "ate_position_m"]


def _style():
    try:
        plt.style.use("seaborn-v0_8-whitegrid")
    except OSError:
        pass


def nees_figure(traces, column="nees_local_pose", bounds=None, title=None):
    """traces: {variant: nees trace table}. bounds: (low, high) of the averaged NEES."""
    _style()
    fig, ax = plt.subplots(figsize=(8.5, 4))
    for variant, df in traces.items():
        if column not in df:
            continue
        ax.plot(df["t"] - df["t"].iloc[0], df[column], linewidth=1.5,
                color=VARIANT_COLORS.get(variant), label=variant)
    if bounds is not None:
        for b in bounds:
            ax.axhline(b, color="#555", linestyle="--", linewidth=1)
    ax.axhline(1.0, color="#388e3c", linestyle=":", linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("time (s)", fontsize=10)
    ax.set_ylabel("NEES / dim", fontsize=10)
    ax.set_title(title or column.replace("_", " "), fontsize=12, fontweight="bold")
    ax.grid(True, linestyle="--", alpha=0.3)
    ax.legend(loc="upper right", frameon=True)
    plt.tight_layout()
    return fig


def three_sigma_figure(trace, prefix="local", title=None):
    """Per-axis error of one run against its 3-sigma envelope; orientations in degrees."""
    _style()
    fig, axes = plt.subplots(2, 3, figsize=(12, 6), sharex=True)
    if trace.empty or f"{prefix}_err_p_x" not in trace:
        fig.suptitle("no data", fontsize=12)
        return fig
    df = trace.dropna(subset=[f"{prefix}_err_p_x"])
    t = df["t"] - trace["t"].iloc[0]
    for ax, axis in zip(axes.ravel(), AXES):
        scale = np.degrees(1.0) if axis.startswith("theta") else 1.0
        err = df[f"{prefix}_err_{axis}"] * scale
        bound = df[f"{prefix}_bound_{axis}"] * scale
        ax.plot(t, err, color="#1565c0", linewidth=1.2)
        ax.plot(t, bound, color="#d32f2f", linestyle="--", linewidth=1)
        ax.plot(t, -bound, color="#d32f2f", linestyle="--", linewidth=1)
        ax.set_ylabel(AXIS_LABELS[axis], fontsize=9)
        ax.grid(True, linestyle="--", alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("time (s)", fontsize=9)
    fig.suptitle(title or f"{prefix} error and 3-sigma bounds", fontsize=12, fontweight="bold")
    plt.tight_layout()
    return fig


def rpe_figure(rpe_df):
    """Position RPE per segment length, one box per variant."""
    _style()
    fig, ax = plt.subplots(figsize=(8.5, 4))
    if rpe_df.empty:
        ax.set_title("no segments long enough for RPE")
        return fig
    lengths = sorted(rpe_df["length"].unique())
    variants = list(dict.fromkeys(rpe_df["variant"]))
    width = 0.8 / max(len(variants), 1)
    for j, variant in enumerate(variants):
        sub = rpe_df[rpe_df["variant"] == variant]
        data = [sub.loc[sub["length"] == length, "position_m"].to_numpy() for length in lengths]
        positions = [i + (j - (len(variants) - 1) / 2) * width for i in range(len(lengths))]
        box = ax.boxplot(data, positions=positions, widths=width * 0.9, patch_artist=True,
                         showfliers=False)
        for patch in box["boxes"]:
            patch.set_facecolor(VARIANT_COLORS.get(variant, "#90caf9"))
            patch.set_alpha(0.6)
        ax.plot([], [], color=VARIANT_COLORS.get(variant, "#90caf9"), linewidth=6, label=variant)
    ax.set_xticks(range(len(lengths)))
    ax.set_xticklabels([f"{length:g} m" for length in lengths])
    ax.set_ylabel("relative position error (m)", fontsize=10)
    ax.set_title("Relative pose error", fontsize=12, fontweight="bold")
    ax.legend(loc="upper left", frameon=True)
    plt.tight_layout()
    return fig


def trajectory_figure(trajectories, title="Trajectories"):
    """trajectories: {label: Trajectory}; interactive 3D lines."""
    fig = go.Figure()
    for label, traj in trajectories.items():
        fig.add_trace(go.Scatter3d(
            x=traj.p[:, 0], y=traj.p[:, 1], z=traj.p[:, 2], mode="lines", name=label,
            line=dict(width=2 if label != "truth" else 4,
                      color=VARIANT_COLORS.get(label, "#212121"))))
    fig.update_layout(title=title, height=600, scene=dict(aspectmode="data",
                      xaxis_title="x (m)", yaxis_title="y (m)", zaxis_title="z (m)"),
                      legend=dict(orientation="h"))
    return fig


def nees_trace_figure(traces, column="nees_local_pose", bounds=None):
    """Plotly counterpart of nees_figure for the viewer."""
    fig = go.Figure()
    for variant, df in traces.items():
        if column in df:
            fig.add_trace(go.Scatter(x=df["t"] - df["t"].iloc[0], y=df[column], mode="lines",
                                     name=variant, line=dict(color=VARIANT_COLORS.get(variant))))
    if bounds is not None:
        for b in bounds:
            fig.add_hline(y=b, line_dash="dash", line_color="#555")
    fig.update_layout(yaxis_type="log", xaxis_title="time (s)", yaxis_title="NEES / dim", height=400)
    return fig


def save_figure(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return path


def write_excel(summary, rpe=None, path="summary.xlsx"):
    """summary.xlsx with a Summary sheet and, when given, an RPE sheet."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".xlsx")
    os.close(fd)
    try:
        with pd.ExcelWriter(tmp, engine="openpyxl") as writer:
            summary.to_excel(writer, sheet_name="Summary", index=False)
            if rpe is not None:
                rpe.to_excel(writer, sheet_name="RPE", index=False)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def _fmt(value):
    if pd.isna(value):
        return "-"
    return f"{value:.3f}" if abs(value) >= 1e-3 else f"{value:.2e}"


def build_pdf_report(summary, figures, path, metadata=None):
    """
    Landscape A4: title, run information, the summary table, then one page
    per figure. figures: {caption: png path}.
    """
    metadata = metadata or {}
    pdf = FPDF(orientation="L", unit="mm", format="A4")
    pdf.add_page()
    pdf.set_font("Arial", "B", 16)
    pdf.cell(0, 10, f"Map-based localization experiment - {date.today()}", ln=True, align="C")
    pdf.ln(4)
    pdf.set_font("Arial", size=10)
    for key in ("map_mode", "runs", "seeds", "config_hash"):
        if key in metadata:
            pdf.cell(0, 6, f"{key}: {metadata[key]}", ln=True)
    pdf.ln(4)

    columns = [c for c in SUMMARY_COLUMNS if c in summary]
    widths = [30, 30] + [27] * (len(columns) - 2)
    pdf.set_font("Arial", "B", 8)
    for c, w in zip(columns, widths):
        pdf.cell(w, 7, c.replace("_", " ")[:18], border=1, align="C")
    pdf.ln()
    pdf.set_font("Arial", size=8)
    for _, row in summary.iterrows():
        for c, w in zip(columns, widths):
            text = str(row[c]) if c in ("variant", "variable") else _fmt(row[c])
            pdf.cell(w, 6, text, border=1, align="C")
        pdf.ln()

    for caption, image in figures.items():
        if not os.path.exists(image):
            logger.warning("figure %s missing, left out of the report", image)
            continue
        pdf.add_page()
        pdf.set_font("Arial", "B", 12)
        pdf.cell(0, 10, caption, ln=True)
        pdf.image(image, x=15, y=25, w=260)

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    pdf.output(path, "F")
    return path
