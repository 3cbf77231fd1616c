"""Static SVG line charts for sweep outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def curve_plot(path, x, series, xlabel, ylabel, title=None):
    """One errorbar line per entry of series: name -> (mean, std)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, (mean, std) in series.items():
        ax.errorbar(x, mean, yerr=std, marker="o", capsize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
