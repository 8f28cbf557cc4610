"""Procedural spurious-correlation images, corruptions and test streams."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .ndgrad import Stream

SEVERITY_TABLE = {
    "gaussian_noise": [0.04, 0.08, 0.12, 0.18, 0.26],
    "impulse_noise": [0.01, 0.03, 0.06, 0.10, 0.17],
    "contrast": [0.75, 0.6, 0.45, 0.3, 0.2],
    "box_blur": [3, 3, 5, 5, 7],
}
CORRUPTIONS = tuple(SEVERITY_TABLE)
SCENARIOS = ("mild", "imbalanced_label", "mixed_shift")


@dataclass
class SpuriousDatasetConfig:
    num_classes: int = 2
    image_size: int = 28
    channels: int = 3
    p_corr_train: float = 0.9
    p_corr_test: float = 0.1
    label_noise: float = 0.05
    n_train: int = 3000
    n_val: int = 1000
    n_test: int = 2048
    seed: int = 0
    # rendering
    band_width: int = 7
    shape_contrast: float = 0.2
    contrast_jitter: float = 0.8  # per-sample contrast ~ U[(1-j) c, (1+j) c]
    tint: float = 0.4
    graded_tint: bool = True  # colour a tints channel a % C with strength a / (K-1)
    tint_jitter: float = 0.9  # per-sample tint strength scaled by U[1-j, 1+j]
    background: float = 0.35
    pixel_noise: float = 0.1

    def __post_init__(self):
        for name in ("p_corr_train", "p_corr_test", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ConfigurationError("split sizes must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.channels < 1 or self.image_size < 4:
            raise ConfigurationError("image must have >= 1 channel and side >= 4")

    @classmethod
    def from_dict(cls, d: dict) -> "SpuriousDatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown dataset config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # observed class label y
    attrs: np.ndarray  # colour id a
    groups: np.ndarray  # g = 2 * y + aligned-or-colour bit

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.images[idx], self.labels[idx], self.attrs[idx], self.groups[idx])


def group_ids(labels, attrs, num_classes):
    """2 * y + a for binary tasks; 2 * y + [a == y] otherwise (always 2C groups)."""
    labels = np.asarray(labels)
    attrs = np.asarray(attrs)
    bit = attrs if num_classes == 2 else (attrs == labels).astype(np.int64)
    return 2 * labels + bit


def _render(cfg: SpuriousDatasetConfig, shape_class, colour, stream: Stream):
    n = len(shape_class)
    H = cfg.image_size
    rr, cc = np.mgrid[0:H, 0:H]
    phase = (stream.integers(0, 2, n) * cfg.band_width + stream.integers(-1, 2, n)).astype(np.float64)
    theta = shape_class * np.pi / cfg.num_classes
    proj = (rr[None] * np.cos(theta)[:, None, None] + cc[None] * np.sin(theta)[:, None, None]
            + phase[:, None, None])
    bands = (np.floor(proj / cfg.band_width) % 2 == 0).astype(np.float64)
    contrast = cfg.shape_contrast * stream.uniform(1 - cfg.contrast_jitter, 1 + cfg.contrast_jitter, n)
    img = np.repeat((cfg.background + contrast[:, None, None] * bands)[:, None], cfg.channels, axis=1)
    strength = colour / (cfg.num_classes - 1) if cfg.graded_tint else np.ones(n)
    strength = strength * stream.uniform(1 - cfg.tint_jitter, 1 + cfg.tint_jitter, n)
    img[np.arange(n), colour % cfg.channels] += cfg.tint * strength[:, None, None]
    img += cfg.pixel_noise * stream.gaussian(img.shape)
    return np.clip(img, 0.0, 1.0)


def _make_split(cfg, n, p_corr, label_noise, stream: Stream) -> Split:
    K = cfg.num_classes
    shape_class = stream.split("labels").permutation(n) % K
    flip = stream.split("noise").uniform(size=n) < label_noise
    other = (shape_class + stream.split("noise_to").integers(1, K, n)) % K
    labels = np.where(flip, other, shape_class)
    agree = stream.split("corr").uniform(size=n) < p_corr
    wrong_colour = (labels + stream.split("colour_to").integers(1, K, n)) % K
    colour = np.where(agree, labels, wrong_colour)
    images = _render(cfg, shape_class, colour, stream.split("render"))
    return Split(images, labels.astype(np.int64), colour.astype(np.int64),
                 group_ids(labels, colour, K).astype(np.int64))


def gen_spurious_dataset(cfg: SpuriousDatasetConfig) -> dict:
    """Return {"source_train", "source_val", "target_test"} splits.

    The class decides the band orientation (class 0 horizontal, class 1
    vertical, angle k * pi / K in general); the colour tint agrees with the
    label with probability p_corr. With graded_tint, colour 0 is untinted
    and higher colour ids tint progressively harder, so colour is a
    brightness cue on one channel rather than a swap between channels.
    Label noise is applied to source_train only.
    """
    root = Stream.from_seed(cfg.seed).split("dataset")
    return {
        "source_train": _make_split(cfg, cfg.n_train, cfg.p_corr_train, cfg.label_noise, root.split("train")),
        "source_val": _make_split(cfg, cfg.n_val, cfg.p_corr_train, 0.0, root.split("val")),
        "target_test": _make_split(cfg, cfg.n_test, cfg.p_corr_test, 0.0, root.split("test")),
    }


def dump_split(split: Split, cfg: SpuriousDatasetConfig, path) -> None:
    doc = {
        "config_echo": asdict(cfg),
        "examples": [
            {"image_shape": list(split.images.shape[1:]),
             "values": [float(v) for v in split.images[i].reshape(-1)],
             "y": int(split.labels[i]), "a": int(split.attrs[i]), "g": int(split.groups[i])}
            for i in range(len(split))
        ],
    }
    Path(path).write_text(json.dumps(doc))


# -- corruptions ------------------------------------------------------------

def corrupt(batch, kind: str, severity: int, stream: Optional[Stream] = None) -> np.ndarray:
    if kind not in SEVERITY_TABLE:
        raise ConfigurationError(f"unknown corruption '{kind}'")
    if severity not in (1, 2, 3, 4, 5):
        raise ConfigurationError(f"severity must be 1..5, got {severity}")
    x = np.asarray(batch, dtype=np.float64)
    level = SEVERITY_TABLE[kind][severity - 1]
    if kind in ("gaussian_noise", "impulse_noise") and stream is None:
        raise ConfigurationError(f"{kind} needs a random stream")
    if kind == "gaussian_noise":
        out = x + level * stream.gaussian(x.shape)
    elif kind == "impulse_noise":
        hit = stream.uniform(size=x.shape) < level
        salt = stream.uniform(size=x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif kind == "contrast":
        out = (x - 0.5) * level + 0.5
    else:
        out = ndimage.uniform_filter(x, size=(1, 1, level, level), mode="nearest")
    return np.clip(out, 0.0, 1.0)


# -- streams ----------------------------------------------------------------

@dataclass
class StreamScenario:
    kind: str = "mild"
    batch_size: int = 64
    corruptions: list = field(default_factory=lambda: list(CORRUPTIONS))
    severity: int = 5

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario '{self.kind}'")
        if self.batch_size < 2:
            raise ConfigurationError("batch size must be >= 2 (cross-batch std needs two samples)")
        for c in self.corruptions:
            if c not in SEVERITY_TABLE:
                raise ConfigurationError(f"unknown corruption '{c}'")

    @classmethod
    def from_dict(cls, d) -> "StreamScenario":
        if isinstance(d, str):
            return cls(kind=d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    attrs: np.ndarray
    groups: np.ndarray
    indices: np.ndarray
    corruption: Optional[str] = None


def _chunks(n, size):
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        bounds.pop(-2)  # fold a singleton tail into the previous batch
    return list(zip(bounds[:-1], bounds[1:]))


def make_stream(test: Split, scenario: StreamScenario, seed: int) -> list:
    """Ordered batches covering every test example exactly once."""
    stream = Stream.from_seed(seed).split("stream").split(scenario.kind)
    n = len(test)
    if scenario.kind == "imbalanced_label":
        classes = np.unique(test.labels)
        block_order = classes[stream.split("blocks").permutation(len(classes))]
        within = stream.split("within")
        order = np.concatenate([np.flatnonzero(test.labels == c)[within.permutation(int((test.labels == c).sum()))] for c in block_order])
    else:
        order = stream.split("order").permutation(n)
    batches = []
    pick = stream.split("corruption")
    for b, (s, e) in enumerate(_chunks(n, scenario.batch_size)):
        idx = order[s:e]
        part = test.subset(idx)
        kind = None
        images = part.images
        if scenario.kind == "mixed_shift":
            kind = scenario.corruptions[int(pick.integers(0, len(scenario.corruptions)))]
            images = corrupt(images, kind, scenario.severity, stream.split(f"corrupt{b}"))
        batches.append(Batch(images, part.labels, part.attrs, part.groups, idx, kind))
    return batches
