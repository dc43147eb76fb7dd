"""Dataset-on-disk helpers: preprocessing runs and in-memory split loading."""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import signal_prep as sp
from .datagen import DatasetManifest, load_manifest, save_manifest
from .imagefiles import read_ppm


@dataclass
class DataBundle:
    """One split loaded into memory, aligned row-wise."""

    segments: np.ndarray  # [N, C, L]
    images: np.ndarray    # [N, 3, H, W]
    labels: np.ndarray    # [N]
    image_ids: list[str]
    subjects: np.ndarray  # [N]
    sample_rate: float
    onset_ms: float

    def __len__(self):
        return self.segments.shape[0]


def preprocess_dataset(raw_dir, out_dir, band_lo: float = 5.0, band_hi: float = 95.0,
                       notch_hz: float = 50.0, filter_order: int = 2,
                       skip: int = sp.DEFAULT_TRIM_SKIP, keep: int = sp.DEFAULT_TRIM_KEEP,
                       phase: str = "causal") -> DatasetManifest:
    """Filter+trim+standardize every segment into a new dataset directory."""
    raw = Path(raw_dir)
    out = Path(out_dir)
    (out / "eeg").mkdir(parents=True, exist_ok=True)
    (out / "img").mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(raw / "manifest.json")

    done = set()
    for row in manifest.rows + manifest.heldout:
        if row.segment not in done:
            seg = sp.read_eegb(raw / row.segment)
            seg.data = seg.data.astype(np.float64)
            processed = sp.preprocess(seg, band_lo=band_lo, band_hi=band_hi,
                                      notch_hz=notch_hz, filter_order=filter_order,
                                      skip=skip, keep=keep, phase=phase)
            sp.write_eegb(out / row.segment, processed.data.astype(np.float32),
                          processed.sample_rate)
            done.add(row.segment)
        if row.image not in done:
            shutil.copyfile(raw / row.image, out / row.image)
            done.add(row.image)

    truth = raw / manifest.truth_file
    if truth.exists():
        shutil.copyfile(truth, out / manifest.truth_file)
    manifest.notes = dict(manifest.notes)
    manifest.notes["preprocessing"] = {
        "band": [band_lo, band_hi], "notch_hz": notch_hz, "order": filter_order,
        "trim_skip": skip, "trim_keep": keep, "phase": phase,
        "onset_ms": skip * 1000.0 / manifest.sample_rate,
    }
    save_manifest(out / "manifest.json", manifest)
    return manifest


def load_split(data_dir, split: str, band: sp.FrequencyBand | None = None,
               window: sp.TimeWindow | None = None, dtype=np.float32,
               manifest: DatasetManifest | None = None,
               rows=None) -> DataBundle:
    """Load one split's segments and images, optionally band/window restricted."""
    root = Path(data_dir)
    if manifest is None:
        manifest = load_manifest(root / "manifest.json")
    if rows is None:
        rows = manifest.heldout if split == "heldout" else manifest.split_rows(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    onset = manifest.notes.get("preprocessing", {}).get("onset_ms", 0.0)

    segments, images, labels, subjects, image_ids = [], [], [], [], []
    image_cache: dict[str, np.ndarray] = {}
    for row in rows:
        seg = sp.read_eegb(root / row.segment)
        seg.data = seg.data.astype(np.float64)
        seg.onset_ms = onset
        if band is not None or window is not None:
            seg = sp.restrict(seg, band=band, window=window)
        segments.append(seg.data.astype(dtype))
        if row.image not in image_cache:
            image_cache[row.image] = read_ppm(root / row.image).astype(dtype)
        images.append(image_cache[row.image])
        labels.append(row.class_id)
        subjects.append(row.subject)
        image_ids.append(row.image_id)

    return DataBundle(
        segments=np.stack(segments),
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        image_ids=image_ids,
        subjects=np.asarray(subjects, dtype=np.int64),
        sample_rate=manifest.sample_rate,
        onset_ms=window.t0_ms if window is not None else onset,
    )
