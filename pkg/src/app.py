import os
import sys

import pandas as pd
import plotly.express as px
import streamlit as st

# --- Import Adaptation for src/ location ---
try:
    from event_logger import EventLogger
    from metrics import LOCAL_POSE, MAP_POSE, RELATIVE_TRANS, nees_bounds
    from report import VARIANT_COLORS, nees_trace_figure, trajectory_figure
    from run_persistence import TRAJECTORY_FILES, RunPersistence, read_tum
except ImportError:
    sys.path.append(os.path.dirname(__file__))
    try:
        from event_logger import EventLogger
        from metrics import LOCAL_POSE, MAP_POSE, RELATIVE_TRANS, nees_bounds
        from report import VARIANT_COLORS, nees_trace_figure, trajectory_figure
        from run_persistence import TRAJECTORY_FILES, RunPersistence, read_tum
    except ImportError as e:
        st.error(f"Error importing modules: {e}")
        st.stop()

NEES_COLUMNS = {
    "Local orientation (d=3)": ("nees_local_orientation", 3),
    "Local position (d=3)": ("nees_local_position", 3),
    "Local pose (d=6)": ("nees_local_pose", 6),
    "Relative orientation (d=3)": ("nees_relative_orientation", 3),
    "Relative position (d=3)": ("nees_relative_position", 3),
    "Relative pose (d=6)": ("nees_relative_pose", 6),
}


@st.cache_data
def load_table(path, mtime):
    return pd.read_csv(path)


def table(store, name):
    path = store.path(name)
    if not os.path.exists(path):
        return None
    return load_table(path, os.path.getmtime(path))


def summary_tab(store, metadata):
    summary = table(store, "summary.csv")
    if summary is None:
        st.info("No summary.csv yet. Run `python src/main.py run` first.")
        return
    exp = metadata.get("experiment", {})
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("Variants", len(exp.get("variants", summary["variant"].unique())))
    c2.metric("Runs", exp.get("runs", int(summary["runs"].max())))
    c3.metric("Map", exp.get("map_mode", "-"))
    c4.metric("Config", exp.get("config_hash", "-"))

    variable = st.radio("Variable", [LOCAL_POSE, RELATIVE_TRANS, MAP_POSE], horizontal=True)
    view = summary[summary["variable"] == variable].drop(columns=["variable"])
    st.dataframe(view.style.format(precision=4), use_container_width=True, hide_index=True)

    if not view.empty:
        fig = px.bar(view, x="variant", y="rmse_position_m", color="variant",
                     color_discrete_map=VARIANT_COLORS, title=f"Position RMSE: {variable}")
        st.plotly_chart(fig, use_container_width=True)

    xlsx = store.path("summary.xlsx")
    if os.path.exists(xlsx):
        with open(xlsx, "rb") as f:
            st.download_button("📥 Download summary.xlsx", f.read(), file_name="summary.xlsx")


def consistency_tab(store, variants, metadata):
    traces = {}
    for variant in variants:
        df = table(store, f"nees_trace_{variant}.csv")
        if df is not None:
            traces[variant] = df
    if not traces:
        st.info("No NEES traces found.")
        return
    label = st.selectbox("Quantity", list(NEES_COLUMNS))
    column, dim = NEES_COLUMNS[label]
    n_runs = metadata.get("experiment", {}).get("runs", 1)
    low, high = nees_bounds(n_runs, dim)
    st.caption(f"95% band for {n_runs} run(s): [{low:.2f}, {high:.2f}]")
    st.plotly_chart(nees_trace_figure(traces, column, (low, high)), use_container_width=True)

    variant = st.selectbox("3-sigma envelope of run 0", list(traces))
    prefix = st.radio("Variable", ["local", "relative"], horizontal=True, key="sigma_prefix")
    df = traces[variant]
    if f"{prefix}_err_p_x" not in df:
        st.info(f"{variant} has no {prefix} errors.")
        return
    for axis in ("theta_x", "theta_y", "theta_z", "p_x", "p_y", "p_z"):
        sub = df[["t", f"{prefix}_err_{axis}", f"{prefix}_bound_{axis}"]].dropna()
        sub = sub.assign(lower=-sub[f"{prefix}_bound_{axis}"])
        fig = px.line(sub, x="t", y=[f"{prefix}_err_{axis}", f"{prefix}_bound_{axis}", "lower"],
                      title=axis, height=250)
        st.plotly_chart(fig, use_container_width=True)


def trajectory_tab(store, variants):
    seeds = sorted({s for v in variants for s in store.seeds(v)})
    if not seeds:
        st.info("No runs stored.")
        return
    seed = st.selectbox("Seed", seeds)
    variable = st.radio("Trajectory", list(TRAJECTORY_FILES), horizontal=True, key="traj_var")
    trajectories = {}
    try:
        trajectories["truth"] = store.load_truth(seed, variable)
    except FileNotFoundError:
        st.warning("Ground truth files are missing for this seed.")
    chosen = st.multiselect("Variants", variants, default=variants)
    for variant in chosen:
        path = os.path.join(store.run_dir(variant, seed), TRAJECTORY_FILES[variable])
        if os.path.exists(path) and os.path.getsize(path) > 0:
            try:
                trajectories[variant] = read_tum(path)
            except ValueError:
                continue
    st.plotly_chart(trajectory_figure(trajectories, f"{variable}, seed {seed}"), use_container_width=True)


def rpe_tab(store):
    segments = table(store, "rpe_segments.csv")
    if segments is None or segments.empty:
        st.info("No RPE segments; the trajectory may be shorter than every segment length.")
        return
    fig = px.box(segments, x="length", y="position_m", color="variant", color_discrete_map=VARIANT_COLORS,
                 points=False, title="Relative position error per segment length")
    st.plotly_chart(fig, use_container_width=True)
    summary = table(store, "rpe.csv")
    if summary is not None:
        st.dataframe(summary, use_container_width=True, hide_index=True)


def observability_tab(store):
    report = table(store, "observability.csv")
    if report is None:
        st.info("Run `python src/main.py observability` to produce the report.")
        return
    passed = int(report["passed"].sum())
    if passed == len(report):
        st.success(f"✅ {passed}/{len(report)} checks passed")
    else:
        st.error(f"❌ {passed}/{len(report)} checks passed")
    st.dataframe(report, use_container_width=True, hide_index=True)
    timing = table(store, "timing.csv")
    if timing is not None:
        fig = px.line(timing[timing["m"] > 0], x="m", y="median_ms", color="update", log_x=True, log_y=True,
                      markers=True, title="Update cost against keyframe count")
        st.plotly_chart(fig, use_container_width=True)


def events_tab(store):
    logger = EventLogger(os.path.join(store.out_dir, "logs"))
    counts = logger.get_all_counts()
    if counts.empty:
        st.info("No filter events logged.")
        return
    st.dataframe(counts, use_container_width=True, hide_index=True)


def main():
    st.set_page_config(page_title="Map-based Localization Results", layout="wide", page_icon="🧭")
    st.markdown("""
        <style>
        .main-header { padding: 10px 0; border-bottom: 1px solid #e0e0e0; margin-bottom: 20px; }
        .main-header h1 { font-weight: 700; color: #1565c0; font-size: 2.0rem; }
        </style>
        <div class="main-header"><h1>Map-based Visual-Inertial Localization</h1></div>
    """, unsafe_allow_html=True)

    st.sidebar.header("Configuration")
    out_dir = st.sidebar.text_input("Output directory", value="output")
    if not os.path.isdir(out_dir):
        st.warning(f"Directory '{out_dir}' does not exist.")
        st.stop()
    store = RunPersistence(out_dir)
    metadata = store.load_metadata()
    variants = store.variants()
    st.sidebar.caption(f"{len(variants)} variant(s) with stored runs")
    if st.sidebar.button("🔄 Reload"):
        st.cache_data.clear()
        st.rerun()

    tabs = st.tabs(["Summary", "Consistency", "Trajectories", "RPE", "Observability & Cost", "Events"])
    with tabs[0]:
        summary_tab(store, metadata)
    with tabs[1]:
        consistency_tab(store, variants, metadata)
    with tabs[2]:
        trajectory_tab(store, variants)
    with tabs[3]:
        rpe_tab(store)
    with tabs[4]:
        observability_tab(store)
    with tabs[5]:
        events_tab(store)


if __name__ == "__main__":
    main()
