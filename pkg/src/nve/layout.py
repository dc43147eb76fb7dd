"""Electrode layout on a normalized 2D scalp disc.

Channels are ordered row-major from the front of the head to the back, left
to right, so consecutive manifest channels form spatial "rows"; the EEG
encoder's cross-channel block relies on this ordering.  Each electrode
carries a cortex-group prefix: Fp (frontal), T (temporal), C (central),
P (parietal), O (occipital).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DISC_CENTER = (0.5, 0.5)
DISC_RADIUS = 0.5
_RING = 0.46  # outermost electrode ring radius


@dataclass
class ScalpLayout:
    names: list[str]
    xy: np.ndarray  # (n, 2) in [0, 1]^2
    groups: list[str]

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64)
        if len(self.names) != len(set(self.names)):
            raise ValueError("electrode names must be unique")
        if self.xy.shape != (len(self.names), 2):
            raise ValueError("xy must be (n_channels, 2)")
        d = np.hypot(self.xy[:, 0] - DISC_CENTER[0], self.xy[:, 1] - DISC_CENTER[1])
        if np.any(d > DISC_RADIUS + 1e-9):
            raise ValueError("all electrodes must lie inside the scalp disc")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(int)
    counts = np.maximum(counts, 1)
    while counts.sum() > total:
        counts[np.argmax(counts)] -= 1
    frac = raw - np.floor(raw)
    order = np.argsort(-frac)
    i = 0
    while counts.sum() < total:
        counts[order[i % len(order)]] += 1
        i += 1
    return counts


def _group_for(dx: float, dy: float) -> str:
    if dy > 0.20:
        return "Fp"
    if dy < -0.20:
        return "O"
    if abs(dx) > 0.30:
        return "T"
    return "C" if dy >= 0 else "P"


def default_layout(n_channels: int = 128) -> ScalpLayout:
    """Deterministic cap layout: electrode rows packed front-to-back."""
    if n_channels < 4:
        raise ValueError("need at least 4 channels for a scalp layout")
    nrows = max(2, int(np.ceil(np.sqrt(n_channels))))
    dys = np.linspace(0.82 * _RING, -0.82 * _RING, nrows)
    widths = np.sqrt(np.maximum(_RING ** 2 - dys ** 2, (0.15 * _RING) ** 2))
    counts = _largest_remainder(widths, n_channels)

    names, coords, groups = [], [], []
    per_group: dict[str, int] = {}
    for dy, width, count in zip(dys, widths, counts):
        if count == 1:
            dxs = np.array([0.0])
        else:
            dxs = np.linspace(-0.9 * width, 0.9 * width, count)
        for dx in dxs:
            group = _group_for(dx, dy)
            per_group[group] = per_group.get(group, 0) + 1
            names.append(f"{group}{per_group[group]}")
            coords.append((DISC_CENTER[0] + dx, DISC_CENTER[1] + dy))
            groups.append(group)
    return ScalpLayout(names=names, xy=np.array(coords), groups=groups)


def save_layout(path, layout: ScalpLayout) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "group"])
        for name, (x, y), group in zip(layout.names, layout.xy, layout.groups):
            writer.writerow([name, f"{x:.6f}", f"{y:.6f}", group])


def load_layout(path) -> ScalpLayout:
    names, coords, groups = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            names.append(row["name"])
            coords.append((float(row["x"]), float(row["y"])))
            groups.append(row["group"])
    if not names:
        raise ValueError(f"{path}: empty layout file")
    return ScalpLayout(names=names, xy=np.array(coords), groups=groups)
