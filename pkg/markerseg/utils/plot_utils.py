"""
Matplotlib style and figure writers.

Figures are rendered with the Agg backend and saved without timestamps or software
tags, so the same data and ``STYLE_VERSION`` always produce the same PNG bytes.
"""
import math
import os
from typing import List
from typing import Sequence

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402

from markerseg.utils.file_utils import ensure_dir  # noqa: E402
from markerseg.utils.models.data_models import IoUReport  # noqa: E402
from markerseg.utils.models.data_models import MethodStats  # noqa: E402

STYLE_VERSION = 1

RC_PARAMS = {
    'font.family': 'DejaVu Sans',
    'font.size': 9,
    'axes.labelsize': 9,
    'axes.titlesize': 10,
    'legend.fontsize': 8,
    'xtick.labelsize': 8,
    'ytick.labelsize': 8,
    'lines.linewidth': 1.2,
    'savefig.dpi': 120,
    'svg.hashsalt': 'markerseg',
}

CLASS_COLORS = ['#7f7f7f', '#d62728', '#2ca02c', '#1f77b4', '#ff7f0e', '#9467bd', '#8c564b', '#e377c2']

GOLDEN_RATIO = (math.sqrt(5) - 1.0) / 2.0


def class_names(n_classes: int) -> List[str]:
    return ['background'] + [f'marker {c}' for c in range(1, n_classes)]


def new_figure(width: float = 7.0, height: float = None):
    height = height or width * GOLDEN_RATIO
    with plt.rc_context(RC_PARAMS):
        fig, ax = plt.subplots(figsize=(width, height), facecolor='w')
    return fig, ax


def save_figure(fig, path: str) -> str:
    ensure_dir(os.path.dirname(path))
    with plt.rc_context(RC_PARAMS):
        fig.savefig(path, format='png', metadata={'Software': None})
    plt.close(fig)
    return path


def plot_per_image_iou(report: IoUReport, path: str) -> str:
    """One IoU trace per class over the image index."""
    fig, ax = new_figure()
    n_classes = len(report.per_class_miou)
    index = list(range(1, len(report.image_ids) + 1))
    for class_id, name in enumerate(class_names(n_classes)):
        values = [row[class_id] for row in report.per_image]
        ax.plot(index, values, label=name, color=CLASS_COLORS[class_id % len(CLASS_COLORS)], marker='.')
    ax.set_xlabel('test image')
    ax.set_ylabel('IoU')
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc='lower left', ncol=3)
    fig.tight_layout()
    return save_figure(fig, path)


def plot_method_comparison(stats: Sequence[MethodStats], path: str) -> str:
    """Grouped bars of per-class mean IoU with std error bars, one group per class."""
    present = [s for s in stats if s.present]
    fig, ax = new_figure(width=8.0)
    if present:
        n_classes = len(present[0].mean)
        width = 0.8 / len(present)
        for offset, method_stats in enumerate(present):
            xs = [c + (offset - (len(present) - 1) / 2) * width for c in range(n_classes)]
            ax.bar(
                xs, method_stats.mean, width=width, yerr=method_stats.std, capsize=2,
                label=method_stats.method, color=CLASS_COLORS[(offset + 1) % len(CLASS_COLORS)],
            )
        ax.set_xticks(list(range(n_classes)))
        ax.set_xticklabels(class_names(n_classes))
    ax.set_ylabel('IoU (mean and std over test images)')
    ax.set_ylim(0, 1.05)
    ax.legend(loc='upper right', ncol=len(present) or 1)
    fig.tight_layout()
    return save_figure(fig, path)
