import streamlit as st
import pandas as pd
import plotly.express as px
import sys
import os
import json
from pathlib import Path

# Add the project root to Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.utils.config import OUTPUT_ROOT
from app.models.cmnet import ABLATION_LABELS

# Page config
st.set_page_config(
    page_title="CMNet Run Browser",
    page_icon="🙂",
    layout="wide"
)

# Title and description
st.title("🙂 CMNet Run Browser")
st.markdown("""
    Browse the artifacts written by the `cmnet` command line: training curves,
    confusion matrices, ablation and alpha-sweep tables, complexity reports and
    saliency maps.
""")


def list_runs(root: Path):
    """Run directories are the ones holding an effective config."""
    if not root.is_dir():
        return []
    return sorted(str(p.parent.relative_to(root)) for p in root.rglob("effective_config.yaml"))


# Sidebar with run selection
with st.sidebar:
    st.header("📁 Runs")
    root = Path(st.text_input("Output root", value=OUTPUT_ROOT))
    runs = list_runs(root)
    if not runs:
        st.info(f"No runs found under {root}")
        st.stop()
    selected = st.selectbox("Run", runs)
    run_dir = root / selected

    with st.expander("Effective config"):
        st.code((run_dir / "effective_config.yaml").read_text(encoding="utf-8"), language="yaml")

error_file = run_dir / "error.json"
if error_file.exists():
    record = json.loads(error_file.read_text(encoding="utf-8"))
    st.error(f"{record['type']}: {record['error']}")

metrics_file = run_dir / "metrics.json"
if metrics_file.exists():
    metrics = json.loads(metrics_file.read_text(encoding="utf-8"))
    cols = st.columns(len(metrics))
    for col, (name, value) in zip(cols, metrics.items()):
        col.metric(name, "-" if value is None else value)

# Training curves
history_file = run_dir / "history.csv"
if history_file.exists():
    st.subheader("Training History")
    history = pd.read_csv(history_file)
    col1, col2 = st.columns([1, 1])
    with col1:
        losses = history.melt(id_vars="epoch", value_vars=["train_loss", "l_sl", "l_gl"], var_name="loss")
        fig = px.line(losses, x="epoch", y="value", color="loss", title="Loss components")
        st.plotly_chart(fig, use_container_width=True)
    with col2:
        accuracy = history.melt(id_vars="epoch", value_vars=["train_acc", "val_acc"], var_name="split")
        fig = px.line(accuracy, x="epoch", y="value", color="split", title="Accuracy")
        st.plotly_chart(fig, use_container_width=True)
    with st.expander("History table"):
        st.dataframe(history, use_container_width=True)

# Confusion matrix
confusion_file = run_dir / "confusion_normalized.csv"
if confusion_file.exists():
    st.subheader("Confusion Matrix")
    matrix = pd.read_csv(confusion_file, index_col="true")
    fig = px.imshow(
        matrix,
        text_auto=".2f",
        color_continuous_scale="Blues",
        zmin=0.0,
        zmax=1.0,
        labels={"x": "Prediction", "y": "Target"},
    )
    st.plotly_chart(fig, use_container_width=True)

# Ablation table
ablation_file = run_dir / "ablation.csv"
if ablation_file.exists():
    st.subheader("Ablation")
    ablation = pd.read_csv(ablation_file)
    st.dataframe(ablation, use_container_width=True)
    fig = px.bar(ablation, x="row", y="accuracy", hover_data=["setting", "parameters"], title="Accuracy by row")
    st.plotly_chart(fig, use_container_width=True)
    st.caption(" · ".join(f"{row}: {label}" for row, label in ABLATION_LABELS.items()))

# Alpha sweep
sweep_file = run_dir / "alpha_sweep.csv"
if sweep_file.exists():
    st.subheader("Alpha Sweep")
    sweep = pd.read_csv(sweep_file)
    fig = px.line(sweep, x="alpha", y="accuracy", markers=True, title="Accuracy for different values of alpha")
    st.plotly_chart(fig, use_container_width=True)

# Complexity
profile_file = run_dir / "profile.csv"
if profile_file.exists():
    st.subheader("Complexity")
    report = pd.read_csv(profile_file)
    latency_file = run_dir / "latency.csv"
    if latency_file.exists():
        report = report.merge(pd.read_csv(latency_file), on="input_size", how="left")
    st.dataframe(report, use_container_width=True)

# Saliency and split previews
images = [name for name in ("overlay.png", "heatmap.png", "left.png", "right.png", "confusion_matrix.png")
          if (run_dir / name).exists()]
if images:
    st.subheader("Images")
    cols = st.columns(len(images))
    for col, name in zip(cols, images):
        col.image(str(run_dir / name), caption=name, use_column_width=True)

# Footer
st.markdown("---")
st.markdown("""
    <div style='text-align: center'>
        <p>Built with ❤️ using Streamlit, PyTorch and Plotly</p>
    </div>
""", unsafe_allow_html=True)
