# plotting.py
# BEV occupancy figures with detection and ground-truth markers

import colorsys
import matplotlib
matplotlib.use('Agg')
import matplotlib.colors as mc
import matplotlib.pyplot as plt
import numpy as np
from msmvd.geometry import BevGridSpec

DETECTION_COLOR = '#2ca02c'
TRUTH_COLOR = '#d62728'

def change_luminosity(color, amount = 1):
    """
    Multiplies the luminosity by the given amount.
    Values > 1 darken, < 1 lighten.
    Input can be matplotlib color string, hex string, or RGB tuple.

    Examples:
    >> change_luminosity('g', 0.3)
    >> change_luminosity('#F034A3', 0.6)
    """
    c = mc.cnames.get(color, color) if isinstance(color, str) else color
    c = colorsys.rgb_to_hls(*mc.to_rgb(c))
    return colorsys.hls_to_rgb(c[0], 1 - amount * (1 - c[1]), c[2])

def _draw_map(ax, M, grid: BevGridSpec, detections, ground_truth, title = None):
    lower, upper = grid.extent
    M = np.zeros(grid.level_shape(3)) if M is None else np.asarray(M, dtype = np.float64)
    image = ax.imshow(M.T, origin = 'lower', extent = (lower[0], upper[0], lower[1], upper[1]),
                      cmap = 'viridis', vmin = 0., vmax = 1., interpolation = 'nearest')
    gt = np.asarray(ground_truth, dtype = np.float64).reshape(-1, 2) if ground_truth is not None else np.zeros((0, 2))
    det = np.asarray(detections, dtype = np.float64).reshape(-1, 2) if detections is not None else np.zeros((0, 2))
    ax.scatter(gt[:, 0], gt[:, 1], marker = 'x', s = 40, color = TRUTH_COLOR, label = 'ground truth', zorder = 5)
    ax.scatter(det[:, 0], det[:, 1], marker = 'o', s = 60, facecolors = 'none',
               edgecolors = change_luminosity(DETECTION_COLOR, 0.8), linewidths = 1.5, label = 'detections', zorder = 6)
    ax.set_xlim(lower[0], upper[0])
    ax.set_ylim(lower[1], upper[1])
    ax.set_aspect('equal')
    ax.set_xlabel('x (m)')
    ax.set_ylabel('y (m)')
    if title:
        ax.set_title(title)
    return image

def plot_bev(M, grid: BevGridSpec, detections = None, ground_truth = None, saveto: str = None, *,
             level_maps: dict = None, title: str = None, size = (6, 6)):
    """
    Occupancy heatmap on the BEV region with detection circles and
        ground-truth crosses. With `level_maps` ({3: M_3, 4: M_4, 5: M_5})
        the levels are drawn side by side instead. Returns the figure.
    """
    if level_maps:
        levels = sorted(level_maps)
        fig, axs = plt.subplots(1, len(levels), figsize = (size[0] * len(levels), size[1]), squeeze = False)
        for ax, level in zip(axs[0], levels):
            image = _draw_map(ax, level_maps[level], grid, detections, ground_truth, title = f'$M_{level}$')
    else:
        fig, ax = plt.subplots(figsize = size)
        image = _draw_map(ax, M, grid, detections, ground_truth, title = title)
    fig.colorbar(image, ax = fig.axes, label = 'occupancy', shrink = 0.8)
    if title and level_maps:
        fig.suptitle(title)
    if saveto is not None:
        plt.savefig(saveto, bbox_inches = 'tight')
    return fig

def close(fig):
    plt.close(fig)
