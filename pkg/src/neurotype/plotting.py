import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.cluster.hierarchy import dendrogram  # noqa: E402

SMALL_SIZE = 8
MEDIUM_SIZE = 10

RC = {
    "font.size": SMALL_SIZE,
    "axes.titlesize": MEDIUM_SIZE,
    "axes.labelsize": MEDIUM_SIZE,
    "xtick.labelsize": SMALL_SIZE,
    "ytick.labelsize": SMALL_SIZE,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_confusion(cm, path, title=None):
    """Row-normalized confusion heat map annotated with raw counts."""
    with plt.rc_context(RC):
        norm = cm.normalized()
        fig, ax = plt.subplots(figsize=(1.1 * cm.k + 2, 1.1 * cm.k + 1.5))
        im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        for i in range(cm.k):
            for j in range(cm.k):
                ax.text(j, i, f"{norm[i, j]:.3f}\n({cm.counts[i, j]})", ha="center",
                        va="center", color="white" if norm[i, j] > 0.5 else "black")
        ax.set_xticks(range(cm.k), cm.class_names, rotation=45, ha="right")
        ax.set_yticks(range(cm.k), cm.class_names)
        ax.set_xlabel("predicted class")
        ax.set_ylabel("true class")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)


def plot_gate_matrix(gate_matrix, tree, order, feature_names, path):
    """Gate heat map (rows in dendrogram order) with the row dendrogram on the left.

    Closed gates are black, fully open gates white.
    """
    G = np.asarray(gate_matrix)
    with plt.rc_context(RC):
        fig = plt.figure(figsize=(12, 8))
        ax_tree = fig.add_axes([0.05, 0.1, 0.12, 0.75], frameon=False)
        ax_map = fig.add_axes([0.18, 0.1, 0.72, 0.75])
        if tree is not None and len(tree):
            dendrogram(tree, orientation="left", ax=ax_tree, no_labels=True,
                       color_threshold=0, above_threshold_color="k")
            ax_tree.invert_yaxis()
        ax_tree.set_xticks([])
        ax_tree.set_yticks([])
        im = ax_map.imshow(G[order], aspect="auto", cmap="gray", vmin=0, vmax=1,
                           interpolation="nearest")
        ax_map.set_xticks(range(G.shape[1]), feature_names, rotation=90)
        ax_map.set_yticks([])
        fig.colorbar(im, ax=ax_map, fraction=0.03)
        return _save(fig, path)


def plot_history(history, path, model):
    epochs = [r.epoch for r in history.records]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(epochs, [r.train_loss for r in history.records], label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.validation_metric for r in history.records], color="firebrick",
                 label="validation metric")
        if model == "lspin":
            ax2.plot(epochs, [r.open_gate_fraction for r in history.records], color="gray",
                     ls="--", label="open-gate fraction")
        ax2.set_ylim(0, 1.02)
        fig.legend(loc="upper right", frameon=False)
        return _save(fig, path)
