"""
Streamlit Frontend for the Row Refresh Simulator
Runs scenarios or loads emitted metrics files and plots their time series.
"""
import os

import pandas as pd
import plotly.graph_objects as go
import streamlit as st
from plotly.subplots import make_subplots

from app import RowRefreshApp
from config import Config
from rowsim.errors import SimulationError
from rowsim.metrics import load_metrics
from rowsim.scenario import ScenarioConfig, load_scenario, with_overrides

# Page config
st.set_page_config(
    page_title="Row Refresh Simulator",
    page_icon="🧮",
    layout="wide",
    initial_sidebar_state="expanded"
)

st.markdown("""
<style>
    #MainMenu {visibility: hidden;}
    footer {visibility: hidden;}
    .section-divider {height: 1px; background: #334155; margin: 1.2rem 0;}
</style>
""", unsafe_allow_html=True)

PLOT_LAYOUT = dict(
    template="plotly_dark",
    paper_bgcolor='rgba(15, 23, 42, 0.8)',
    plot_bgcolor='rgba(30, 41, 59, 0.5)',
)


@st.cache_data(show_spinner=False)
def run_cached(defense: str, attack: str, m: int, duration_ms: float, seed: int, scenario_path: str):
    """Run one scenario; cached on its parameters"""
    base = load_scenario(scenario_path) if scenario_path else ScenarioConfig()
    scenario = with_overrides(base, defense=defense, attack=attack, m=m, seed=seed, duration_ms=duration_ms)
    report = RowRefreshApp(scenario).run(emit=False)
    return report.frame, report.summary(), report.footprint


def plot_time_series(frame: pd.DataFrame):
    t_ms = frame['sim_ns'] / 1e6
    fig = make_subplots(rows=3, cols=1, shared_xaxes=True, vertical_spacing=0.05,
                        subplot_titles=('Defense events per ms', 'Tracked nodes', 'Bit flips per ms'))
    fig.add_trace(go.Scatter(x=t_ms, y=frame['rsvd_faults'], name='RSVD faults',
                             line=dict(color='#06b6d4', width=2)), row=1, col=1)
    fig.add_trace(go.Scatter(x=t_ms, y=frame['refreshes'], name='Refreshes',
                             line=dict(color='#8b5cf6', width=2)), row=1, col=1)
    fig.add_trace(go.Scatter(x=t_ms, y=frame['leak_events'], name='Leak events',
                             line=dict(color='#f59e0b', width=1, dash='dot')), row=1, col=1)
    fig.add_trace(go.Scatter(x=t_ms, y=frame['pt_nodes'], name='Page tables',
                             line=dict(color='#10b981', width=2)), row=2, col=1)
    fig.add_trace(go.Scatter(x=t_ms, y=frame['adj_nodes'], name='Adjacent pages',
                             line=dict(color='#eab308', width=2)), row=2, col=1)
    fig.add_trace(go.Bar(x=t_ms, y=frame['flips_pt'], name='Page-table row flips',
                         marker_color='#ef4444'), row=3, col=1)
    fig.add_trace(go.Bar(x=t_ms, y=frame['flips_other'], name='Other flips',
                         marker_color='#94a3b8', opacity=0.7), row=3, col=1)
    fig.update_layout(height=750, xaxis3_title="Simulated time (ms)", barmode='stack', **PLOT_LAYOUT)
    st.plotly_chart(fig, use_container_width=True)


def show_summary(summary: dict):
    cols = st.columns(4)
    cols[0].metric("Page-table row flips", summary.get('flips_in_pt_rows', 0))
    cols[1].metric("All flips", summary.get('flips_total', 0))
    cols[2].metric("RSVD faults", summary.get('rsvd_faults', 0))
    cols[3].metric("Refreshes", summary.get('refreshes', 0))
    cols = st.columns(4)
    cols[0].metric("Armed PTEs", summary.get('armed_ptes', 0))
    cols[1].metric("Max unrefreshed (µs)", f"{summary.get('max_unrefreshed_hammer_ns', 0) / 1000:,.1f}")
    cols[2].metric("Simulated time (ms)", f"{summary.get('sim_ns', 0) / 1e6:,.1f}")
    cols[3].metric("Peak footprint (KiB)", f"{summary.get('peak_footprint_bytes', 0) / 1024:,.1f}")


# Sidebar
st.sidebar.markdown("## 🧮 Row Refresh Simulator")
source = st.sidebar.radio("Source", ["Run scenario", "Load metrics file"])
st.sidebar.markdown("<div class='section-divider'></div>", unsafe_allow_html=True)

frame, summary, footprint = None, None, []
if source == "Run scenario":
    scenario_path = st.sidebar.text_input("Scenario file (optional)", "")
    defense = st.sidebar.selectbox("Defense", ['softtrr', 'none', 'chiptrr'])
    attack = st.sidebar.selectbox("Attack", ['pthammer', 'memory_spray', 'cattmew', 'none'])
    m = st.sidebar.slider("Victims (m)", 1, Config.ATTACK_M, 5)
    duration_ms = st.sidebar.number_input("Duration per victim (ms)", 1.0, 10_000.0, 200.0)
    seed = st.sidebar.number_input("Seed", 0, 2 ** 31 - 1, Config.SEED)
    if st.sidebar.button("▶ Run", use_container_width=True):
        with st.spinner("Simulating..."):
            try:
                frame, summary, footprint = run_cached(defense, attack, int(m), float(duration_ms),
                                                       int(seed), scenario_path.strip())
            except SimulationError as e:
                st.error(f"Scenario failed: {e}")
else:
    path = st.sidebar.text_input("Metrics file", Config.DEFAULT_METRICS_PATH)
    if path and os.path.exists(path):
        frame, summary = load_metrics(path)
    elif path:
        st.sidebar.warning("File not found")

st.markdown("# Row Refresh Simulator")
if frame is None:
    st.info("Run a scenario or load a metrics file from the sidebar.")
else:
    show_summary(summary)
    st.markdown("<div class='section-divider'></div>", unsafe_allow_html=True)
    if frame.empty:
        st.warning("No samples recorded (the run was shorter than one sampling interval).")
    else:
        plot_time_series(frame)
    if footprint:
        st.markdown("### 💾 Defense footprint")
        fp = pd.DataFrame(footprint)
        fig = go.Figure(go.Scatter(x=fp['sim_ns'] / 1e6, y=fp['bytes'] / 1024, fill='tozeroy',
                                   line=dict(color='#06b6d4', width=2)))
        fig.update_layout(height=300, xaxis_title="Simulated time (ms)", yaxis_title="KiB", **PLOT_LAYOUT)
        st.plotly_chart(fig, use_container_width=True)
    with st.expander("Raw samples"):
        st.dataframe(frame, use_container_width=True)
        st.download_button("Download CSV", frame.to_csv(index=False), "metrics.csv", "text/csv")
