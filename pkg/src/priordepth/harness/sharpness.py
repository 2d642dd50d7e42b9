"""How far depth edges bleed past semantic boundaries."""
from __future__ import annotations

import numpy as np


def boundary_band(semantic, width=2):
    """Pixels within Chebyshev distance ``width`` of a pixel of another class."""
    semantic = np.asarray(semantic)
    h, w = semantic.shape
    near = np.zeros((h, w), dtype=bool)
    for dy in range(-width, width + 1):
        for dx in range(-width, width + 1):
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            near[yd, xd] |= semantic[ys, xs] != semantic[yd, xd]
    return near


def boundary_bleed(depth, semantic, width=2):
    """Mean ``|log d_p - log d_q|`` over 4-neighbour pairs of the same class near a boundary.

    A depth edge that sits exactly on the semantic boundary scores 0; one
    smeared across it leaves log-depth slope on both sides and scores higher.
    """
    log_d = np.log(np.asarray(depth, dtype=np.float64))
    semantic = np.asarray(semantic)
    band = boundary_band(semantic, width)
    diffs = []
    for a, b in ((np.s_[:, 1:], np.s_[:, :-1]), (np.s_[1:, :], np.s_[:-1, :])):
        keep = (semantic[a] == semantic[b]) & band[a] & band[b]
        diffs.append(np.abs(log_d[a] - log_d[b])[keep])
    diffs = np.concatenate(diffs)
    if diffs.size == 0:
        raise ValueError("no same-class neighbour pairs near a semantic boundary")
    return float(diffs.mean())


def wrong_side_fraction(depth, semantic, width=2):
    """Share of the log-depth variation near a boundary that lies inside a class.

    Sums ``|log d_p - log d_q|`` over 4-neighbour pairs in the boundary band;
    returns the same-class part over the total. 0 for a clean step edge on the
    boundary, approaching 1 when the edge sits off the boundary or is smeared.
    """
    log_d = np.log(np.asarray(depth, dtype=np.float64))
    semantic = np.asarray(semantic)
    band = boundary_band(semantic, width)
    inside = total = 0.0
    for a, b in ((np.s_[:, 1:], np.s_[:, :-1]), (np.s_[1:, :], np.s_[:-1, :])):
        keep = band[a] & band[b]
        diff = np.abs(log_d[a] - log_d[b])
        inside += diff[keep & (semantic[a] == semantic[b])].sum()
        total += diff[keep].sum()
    if total == 0:
        raise ValueError("depth is constant across the boundary band")
    return float(inside / total)
