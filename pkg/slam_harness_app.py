import streamlit as st
import pandas as pd
from dataclasses import replace

from core.pipeline import SequenceData, run_slam, simulate
from src.engines.trajectory_metrics import summarize_runs
from src.models import motion_model
from src.utils.data_loaders import RunConfig, load_preset
from src.utils.log import setup_logging

setup_logging(0)

st.title("Synthetic-Flow VO / SLAM – Test Harness")

preset = st.selectbox("SLAM preset", ["kitti_supervised", "kitti_unsupervised", "euroc_supervised", "euroc_unsupervised"])
seed = int(st.number_input("Seed", min_value=0, value=0, step=1))
noisy = st.checkbox("Corrupt odometry", value=True)

cfg = RunConfig()
cfg = replace(
    cfg,
    sim=replace(cfg.sim, poses_per_segment=13, laps=1.25),
    slam=replace(cfg.slam, **{k: v for k, v in load_preset(preset).items() if k in ("C_si", "C_r", "T_loop")}, loop_flow="oracle"),
    odometry_noise=replace(cfg.odometry_noise, enabled=noisy),
)

# --- Simulation ---
st.header("Simulated Sequence")
try:
    run, intr = simulate(cfg, seed)
    st.json(run.manifest)
    st.image(run.images[0], caption="frame 0", clamp=True)
except Exception as e:
    st.error(f"Simulation failed: {e}")
    st.stop()

# --- Motion model ---
st.header("Motion Model Fit")
try:
    model = motion_model.fit(run.motions) if len(run.motions) >= motion_model.MIN_SAMPLES else None
    if model is None:
        st.write("Too few motions to fit a model.")
    else:
        st.json(model.to_params())
except Exception as e:
    st.error(f"Motion model fit failed: {e}")

# --- SLAM ---
st.header("VO vs SLAM")
try:
    result = run_slam(SequenceData.from_sim(run, intr), cfg, seed)
    st.write(f"{len(result.loops_used)} loop edges, {result.iterations} LM iterations, chi2 {result.chi2:.4g}")
    st.dataframe(summarize_runs([result.metrics["vo"]]).rename(columns=lambda c: f"vo_{c}"))
    st.dataframe(summarize_runs([result.metrics["slam"]]).rename(columns=lambda c: f"slam_{c}"))
    st.line_chart(
        pd.DataFrame(
            {
                "gt_x": run.trajectory.positions()[:, 0],
                "vo_x": result.vo_trajectory.positions()[:, 0],
                "slam_x": result.slam_trajectory.positions()[:, 0],
            }
        )
    )
except Exception as e:
    st.error(f"SLAM test failed: {e}")
