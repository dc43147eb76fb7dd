"""Synthetic paired EEG/image dataset generator with planted ground truth.

Each class gets a gamma-band signature (one sinusoid per active channel) and
a textured salient image patch.  Segments are the signature plus 1/f-shaped
background noise with per-segment phase/amplitude jitter; the signature is
absent during the first ``trim_skip`` samples to mimic stimulus onset.
Everything derives deterministically from the master seed.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagefiles import write_ppm
from .layout import default_layout
from .signal_prep import DEFAULT_TRIM_SKIP, write_eegb

GAMMA_LO, GAMMA_HI = 55.0, 95.0

_SEED_EEG, _SEED_IMAGE, _SEED_TRUTH, _SEED_SPLIT = 101, 202, 303, 404

N_TEXTURES = 6


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 40
    segments_per_class: int = 50  # images per class; one segment per subject each
    n_subjects: int = 6
    channels: int = 128
    samples: int = 500
    sample_rate: float = 1000.0
    image_size: int = 64
    snr: float = 1.0
    active_channels_per_class: int = 12
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "segments_per_class", "n_subjects", "channels",
                     "samples", "image_size", "active_channels_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.snr <= 0:
            raise ValueError("snr must be > 0")
        if self.active_channels_per_class > self.channels:
            raise ValueError("more active channels than channels")


@dataclass
class ClassTruth:
    class_id: int
    active_channels: list[int]
    signature: list[tuple[float, float, int]]  # (freq Hz, phase rad, channel)
    patch: tuple[int, int, int, int]  # base (x0, y0, w, h)
    texture: int


@dataclass
class PlantedTruth:
    classes: list[ClassTruth]
    images: dict[str, dict]  # image_id -> {"patch": [x0,y0,w,h], "center": [x,y]}
    segment_seeds: dict[str, list[int]]

    def patch_for(self, image_id: str) -> tuple[int, int, int, int]:
        return tuple(self.images[image_id]["patch"])

    def center_for(self, image_id: str) -> tuple[int, int]:
        return tuple(self.images[image_id]["center"])


@dataclass
class ManifestRow:
    segment: str
    image: str
    image_id: str
    class_id: int
    subject: int
    split: str = "train"


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    config: dict
    config_hash: str
    truth_file: str
    sample_rate: float
    channel_names: list[str]
    heldout: list[ManifestRow] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def image_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            seen.setdefault(r.image_id)
        return list(seen)


def _config_hash(config: GeneratorConfig) -> str:
    canon = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()[:16]


def _pink_noise(rng: np.random.Generator, channels: int, samples: int,
                sample_rate: float) -> np.ndarray:
    """1/f-power-shaped noise, unit std per channel."""
    white = rng.normal(size=(channels, samples))
    spectrum = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(samples, d=1.0 / sample_rate)
    shaping = 1.0 / np.sqrt(np.maximum(freqs, 1.0))
    shaped = np.fft.irfft(spectrum * shaping, samples, axis=-1)
    return shaped / shaped.std(axis=-1, keepdims=True)


def _plant_truth(config: GeneratorConfig) -> list[ClassTruth]:
    rng = np.random.default_rng((config.seed, _SEED_TRUTH))
    pool = list(rng.permutation(config.channels))
    size = config.image_size
    lo = int(np.ceil(0.2 * size))
    hi = int(np.floor(0.5 * size))
    margin = int(np.floor(0.1 * size))
    classes = []
    for k in range(config.n_classes):
        m = config.active_channels_per_class
        if len(pool) >= m:
            channels = [int(pool.pop()) for _ in range(m)]
        else:
            channels = [int(c) for c in rng.choice(config.channels, m, replace=False)]
        signature = [(float(rng.uniform(GAMMA_LO, GAMMA_HI)),
                      float(rng.uniform(0.0, 2.0 * np.pi)), c) for c in channels]
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(margin, size - w - margin + 1))
        y0 = int(rng.integers(margin, size - h - margin + 1))
        classes.append(ClassTruth(class_id=k, active_channels=channels,
                                  signature=signature, patch=(x0, y0, w, h),
                                  texture=k % N_TEXTURES))
    return classes


def _class_colors(k: int, n_classes: int):
    c1 = colorsys.hsv_to_rgb(k / max(n_classes, 1), 0.95, 1.0)
    c2 = colorsys.hsv_to_rgb((k / max(n_classes, 1) + 0.5) % 1.0, 0.95, 0.45)
    return np.array(c1), np.array(c2)


def _texture_mask(texture: int, w: int, h: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    if texture == 0:
        return ((xs // 4 + ys // 4) % 2).astype(bool)
    if texture == 1:
        return ((ys // 3) % 2).astype(bool)
    if texture == 2:
        return ((xs // 3) % 2).astype(bool)
    if texture == 3:
        return (((xs + ys) // 4) % 2).astype(bool)
    if texture == 4:
        return ((xs % 6 - 3) ** 2 + (ys % 6 - 3) ** 2 <= 4)
    r = np.hypot(xs - w / 2.0, ys - h / 2.0)
    return ((r // 3) % 2).astype(bool)


def _render_image(config: GeneratorConfig, truth: ClassTruth, class_id: int,
                  image_index: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    size = config.image_size
    rng = np.random.default_rng((config.seed, _SEED_IMAGE, class_id, image_index))
    grid = rng.uniform(0.25, 0.6, size=(3, 4, 4))
    background = ndimage.zoom(grid, (1, size / 4.0, size / 4.0), order=1)
    image = background + rng.normal(0.0, 0.02, size=(3, size, size))

    x0, y0, w, h = truth.patch
    jitter = int(np.floor(0.1 * size))
    dx = int(rng.integers(-jitter, jitter + 1))
    dy = int(rng.integers(-jitter, jitter + 1))
    x0 = int(np.clip(x0 + dx, 0, size - w))
    y0 = int(np.clip(y0 + dy, 0, size - h))

    c1, c2 = _class_colors(class_id, config.n_classes)
    mask = _texture_mask(truth.texture, w, h)
    patch = np.where(mask[None, :, :], c1[:, None, None], c2[:, None, None])
    image[:, y0:y0 + h, x0:x0 + w] = patch
    return np.clip(image, 0.0, 1.0), (x0, y0, w, h)


def _render_segment(config: GeneratorConfig, truth: ClassTruth, class_id: int,
                    image_index: int, subject: int) -> tuple[np.ndarray, tuple]:
    seed_key = (config.seed, _SEED_EEG, class_id, image_index, subject)
    rng = np.random.default_rng(seed_key)
    noise = _pink_noise(rng, config.channels, config.samples, config.sample_rate)
    t = np.arange(config.samples) / config.sample_rate
    amplitude = config.snr * np.sqrt(2.0)
    signal = np.zeros_like(noise)
    for freq, phase, channel in truth.signature:
        amp_jit = amplitude * rng.uniform(0.9, 1.1)
        phase_jit = phase + rng.uniform(-0.3, 0.3)
        signal[channel] += amp_jit * np.sin(2.0 * np.pi * freq * t + phase_jit)
    signal[:, :DEFAULT_TRIM_SKIP] = 0.0  # no class signal before stimulus onset
    return noise + signal, seed_key


def generate(config: GeneratorConfig, out_dir,
             ratios=(0.8, 0.1, 0.1)) -> tuple[DatasetManifest, PlantedTruth]:
    """Write a full dataset tree (eeg/, img/, manifest.json, truth.json)."""
    out = Path(out_dir)
    (out / "eeg").mkdir(parents=True, exist_ok=True)
    (out / "img").mkdir(parents=True, exist_ok=True)

    classes = _plant_truth(config)
    layout = default_layout(config.channels)
    truth = PlantedTruth(classes=classes, images={}, segment_seeds={})
    rows: list[ManifestRow] = []

    for k in range(config.n_classes):
        for i in range(config.segments_per_class):
            image_id = f"img_{k:03d}_{i:04d}"
            image, patch = _render_image(config, classes[k], k, i)
            image_rel = f"img/{image_id}.ppm"
            write_ppm(out / image_rel, image)
            cx = patch[0] + patch[2] // 2
            cy = patch[1] + patch[3] // 2
            truth.images[image_id] = {"patch": list(patch), "center": [cx, cy]}
            for s in range(config.n_subjects):
                seg_id = f"seg_{k:03d}_{i:04d}_s{s}"
                data, seed_key = _render_segment(config, classes[k], k, i, s)
                seg_rel = f"eeg/{seg_id}.eegb"
                write_eegb(out / seg_rel, data.astype(np.float32), config.sample_rate)
                truth.segment_seeds[seg_id] = list(seed_key)
                rows.append(ManifestRow(segment=seg_rel, image=image_rel,
                                        image_id=image_id, class_id=k, subject=s))

    manifest = DatasetManifest(
        rows=rows,
        config=asdict(config),
        config_hash=_config_hash(config),
        truth_file="truth.json",
        sample_rate=config.sample_rate,
        channel_names=list(layout.names),
    )
    manifest = split(manifest, ratios=ratios, seed=(config.seed, _SEED_SPLIT))
    save_truth(out / "truth.json", truth)
    save_manifest(out / "manifest.json", manifest)
    return manifest, truth


def split(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed=0) -> DatasetManifest:
    """Assign train/val/test per image (never per segment), stratified by class."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios {ratios} must be nonnegative and sum to 1")
    by_class: dict[int, list[str]] = {}
    seen = set()
    for row in manifest.rows:
        if row.image_id not in seen:
            seen.add(row.image_id)
            by_class.setdefault(row.class_id, []).append(row.image_id)

    rng = np.random.default_rng(seed)
    names = ("train", "val", "test")
    assignment: dict[str, str] = {}
    min_images = sum(1 for r in ratios if r > 0)
    for class_id in sorted(by_class):
        images = by_class[class_id]
        if all(r > 0 for r in ratios) and len(images) < 3:
            raise ValueError(f"class {class_id} has {len(images)} images, need >= 3")
        if len(images) < min_images:
            raise ValueError(f"class {class_id} has too few images to split")
        images = [images[i] for i in rng.permutation(len(images))]
        raw = [len(images) * r for r in ratios]
        counts = [int(np.floor(v)) for v in raw]
        fracs = [v - c for v, c in zip(raw, counts)]
        order = np.argsort([-f for f in fracs], kind="stable")
        i = 0
        while sum(counts) < len(images):
            counts[order[i % 3]] += 1
            i += 1
        pos = 0
        for name, count in zip(names, counts):
            for image_id in images[pos:pos + count]:
                assignment[image_id] = name
            pos += count

    rows = [replace(r, split=assignment[r.image_id]) for r in manifest.rows]
    return replace(manifest, rows=rows)


def exclude_class(manifest: DatasetManifest, class_id: int) -> DatasetManifest:
    """Remove one class from every split, keeping its rows as a held-out list."""
    if class_id not in {r.class_id for r in manifest.rows}:
        raise ValueError(f"unknown class {class_id}")
    kept = [r for r in manifest.rows if r.class_id != class_id]
    held = [r for r in manifest.rows if r.class_id == class_id]
    return replace(manifest, rows=kept, heldout=list(manifest.heldout) + held)


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------

def save_manifest(path, manifest: DatasetManifest) -> None:
    payload = {
        "rows": [asdict(r) for r in manifest.rows],
        "heldout": [asdict(r) for r in manifest.heldout],
        "config": manifest.config,
        "config_hash": manifest.config_hash,
        "truth_file": manifest.truth_file,
        "sample_rate": manifest.sample_rate,
        "channel_names": manifest.channel_names,
        "notes": manifest.notes,
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_manifest(path) -> DatasetManifest:
    payload = json.loads(Path(path).read_text())
    return DatasetManifest(
        rows=[ManifestRow(**r) for r in payload["rows"]],
        heldout=[ManifestRow(**r) for r in payload.get("heldout", [])],
        config=payload["config"],
        config_hash=payload["config_hash"],
        truth_file=payload["truth_file"],
        sample_rate=payload["sample_rate"],
        channel_names=payload["channel_names"],
        notes=payload.get("notes", {}),
    )


def save_truth(path, truth: PlantedTruth) -> None:
    payload = {
        "classes": [asdict(c) for c in truth.classes],
        "images": truth.images,
        "segment_seeds": truth.segment_seeds,
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_truth(path) -> PlantedTruth:
    payload = json.loads(Path(path).read_text())
    classes = [ClassTruth(class_id=c["class_id"],
                          active_channels=list(c["active_channels"]),
                          signature=[tuple(s) for s in c["signature"]],
                          patch=tuple(c["patch"]),
                          texture=c["texture"]) for c in payload["classes"]]
    return PlantedTruth(classes=classes, images=payload["images"],
                        segment_seeds=payload["segment_seeds"])
