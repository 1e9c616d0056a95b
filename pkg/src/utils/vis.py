import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns


def plot_attention(trace, layer: int = 0, head: int = 0, path=None, batch: int = 0, ax=None, title=None):
    """
    Heatmap of one head's post-softmax attention. ``trace`` is an AttnTrace or a list of them.
    """
    if isinstance(trace, (list, tuple)):
        trace = trace[layer]
    probs = trace.probs[batch, head].detach().cpu().numpy()

    fig = None
    if ax is None:
        fig, ax = plt.subplots(figsize=(6, 5))
    sns.heatmap(probs, ax=ax, cmap="viridis", vmin=0.0, vmax=1.0, square=True, cbar=True)
    ax.set_xlabel("key position")
    ax.set_ylabel("query position")
    ax.set_title(title or f"layer {layer} head {head}")

    if path is not None and fig is not None:
        fig.savefig(path, bbox_inches="tight", dpi=150)
        plt.close(fig)
    return ax


def plot_curve(df: pd.DataFrame, path=None, x: str = "position", y: str = "alpha", hue=None, ax=None, title=None):
    fig = None
    if ax is None:
        fig, ax = plt.subplots(figsize=(7, 4))
    sns.lineplot(data=df, x=x, y=y, hue=hue, ax=ax, marker="o")
    ax.grid(True, alpha=0.3, linestyle="--")
    if title:
        ax.set_title(title)

    if path is not None and fig is not None:
        fig.savefig(path, bbox_inches="tight", dpi=150)
        plt.close(fig)
    return ax
