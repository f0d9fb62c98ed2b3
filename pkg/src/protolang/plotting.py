"""Matplotlib defaults and small figure helpers for run reports."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
}


def new_figure(nrows=1, ncols=1, **kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows=nrows, ncols=ncols, **kw)
    return fig, ax


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def sweep_figure(xs, means, halfwidths, xlabel, title=None):
    """Accuracy (percent) against a swept hyperparameter, with 95% CI bars."""
    fig, ax = new_figure()
    ax.errorbar(xs, [100 * m for m in means], yerr=[100 * h for h in halfwidths], marker="o", capsize=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("5-way accuracy (%)")
    ax.set_xticks(list(xs))
    if title:
        ax.set_title(title)
    return fig


def curves_figure(curves: dict, title=None):
    """Per-epoch training losses (left) and validation accuracy (right)."""
    fig, (left, right) = new_figure(1, 2, figsize=(8.0, 3.0))
    for key, label in (("epi", "L_epi"), ("lang", "L_lang / aux"), ("train", "L_train")):
        if curves.get(key):
            left.plot(curves[key], label=label)
    left.set_xlabel("epoch")
    left.set_yscale("symlog", linthresh=1.0)
    left.legend(frameon=False)
    if curves.get("val_accuracy"):
        right.plot([100 * v for v in curves["val_accuracy"]])
    right.set_xlabel("epoch")
    right.set_ylabel("val accuracy (%)")
    if title:
        fig.suptitle(title)
    return fig
