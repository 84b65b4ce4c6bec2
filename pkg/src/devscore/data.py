"""Synthetic benchmarks and split protocols.

Tabular sets are Gaussian mixtures with planted anomaly clusters placed in
distinct directions away from the normal mass.  Texture sets are sinusoid
gratings with planted defects (blob, scratch, band) plus pixel-true masks.
Splits reproduce the few-shot protocols: a handful of labeled anomalies,
optional single-seen-class (open-set) labeling, and optional contamination
of the normal pool by mislabeled anomalies.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .bags import Bag, Geometry
from .errors import ConfigError, ContractError

Array = np.ndarray

STD_FLOOR = 1e-6
CONTAMINATION_CAP = 0.2


# ---- tabular --------------------------------------------------------------


@dataclass
class TabularGenConfig:
    """Gaussian mixture for normals plus one Gaussian cluster per anomaly class."""
    n_normal: int
    dim: int
    normal_components: tuple[tuple[tuple[float, ...], float], ...]  # (mean, scale)
    anomaly_classes: tuple[tuple[int, tuple[float, ...], float], ...]  # (count, mean, scale)
    seed: int = 0

    def __post_init__(self):
        if self.n_normal < 1 or self.dim < 1:
            raise ConfigError("n_normal and dim must be positive")
        if not self.normal_components:
            raise ConfigError("need at least one normal component")
        for mean, scale in self.normal_components:
            if len(mean) != self.dim or scale <= 0:
                raise ConfigError("normal component mean/scale malformed")
        means = []
        for count, mean, scale in self.anomaly_classes:
            if count < 1 or len(mean) != self.dim or scale <= 0:
                raise ConfigError("anomaly class count/mean/scale malformed")
            means.append(tuple(mean))
        if len(set(means)) != len(means):
            raise ConfigError("anomaly class means must be distinct")


def standard_tabular_config(seed: int = 0, n_normal: int = 2000,
                            anomaly_count: int = 200, dim: int = 8) -> TabularGenConfig:
    """Two normal clusters and three anomaly clusters in correlated directions."""
    if dim < 4:
        raise ConfigError(f"standard config needs dim >= 4, got {dim}")
    e = np.eye(dim)
    sep = 1.5 * e[0]
    base = np.full(dim, 1.5)
    classes = tuple(
        (anomaly_count, tuple(base + 3.0 * e[k + 1]), 1.0) for k in range(3)
    )
    return TabularGenConfig(
        n_normal=n_normal, dim=dim,
        normal_components=((tuple(sep), 1.0), (tuple(-sep), 1.0)),
        anomaly_classes=classes, seed=seed,
    )


def gen_tabular(cfg: TabularGenConfig) -> list[Bag]:
    """Single-instance bags; anomalies carry their class id."""
    rng = np.random.default_rng(cfg.seed)
    bags: list[Bag] = []
    comp = rng.integers(0, len(cfg.normal_components), size=cfg.n_normal)
    noise = rng.standard_normal((cfg.n_normal, cfg.dim))
    means = np.array([m for m, _ in cfg.normal_components])
    scales = np.array([s for _, s in cfg.normal_components])
    x_norm = means[comp] + noise * scales[comp, None]
    for i in range(cfg.n_normal):
        bags.append(Bag(id=f"n{i:05d}", instances=x_norm[i:i + 1], y=0))
    serial = 0
    for class_id, (count, mean, scale) in enumerate(cfg.anomaly_classes):
        x = np.asarray(mean) + rng.standard_normal((count, cfg.dim)) * scale
        for i in range(count):
            bags.append(Bag(id=f"a{serial:05d}", instances=x[i:i + 1], y=1,
                            class_id=class_id))
            serial += 1
    return bags


# ---- texture --------------------------------------------------------------


@dataclass
class DefectSpec:
    """One planted defect family: shape, intensity shift, size range in px."""
    shape: str
    intensity: float = 0.8
    size: tuple[int, int] = (5, 9)

    def __post_init__(self):
        if self.shape not in ("blob", "scratch", "band"):
            raise ConfigError(f"unknown defect shape {self.shape!r}")
        if self.size[0] < 1 or self.size[1] < self.size[0]:
            raise ConfigError(f"bad size range {self.size}")


DEFAULT_DEFECTS = (
    DefectSpec("blob", intensity=0.9, size=(6, 10)),
    DefectSpec("scratch", intensity=1.0, size=(10, 18)),
    DefectSpec("band", intensity=0.7, size=(4, 6)),
)


@dataclass
class TextureGenConfig:
    """Sinusoid-grating images with optional planted defects."""
    image_size: int = 32
    n_normal: int = 160
    n_per_defect: int = 40
    defects: tuple[DefectSpec, ...] = DEFAULT_DEFECTS
    noise_std: float = 0.05
    patch: int = 8
    stride: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if not 1 <= self.patch <= self.image_size:
            raise ConfigError(f"patch must lie in [1, {self.image_size}], got {self.patch}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        for d in self.defects:
            if d.size[1] > self.image_size:
                raise ConfigError(f"defect size {d.size} exceeds image size {self.image_size}")


@dataclass
class TextureSample:
    image_id: str
    image: Array            # (s, s) float64
    y: int
    class_id: int | None = None
    mask: Array | None = None  # (s, s) uint8


def _grating(size: int, rng: np.random.Generator, noise_std: float,
             stripe_axis: int) -> Array:
    # axis-aligned stripes with random frequency and phase; keeping the
    # orientation family small makes the normal patch manifold learnable
    # from a couple hundred images
    freq = rng.uniform(2.5, 4.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    carrier = (xx if stripe_axis == 0 else yy) / size
    img = 0.5 + 0.25 * np.sin(2.0 * np.pi * freq * carrier + phase)
    return img + rng.normal(0.0, noise_std, size=(size, size))


def _defect_mask(spec: DefectSpec, size: int, rng: np.random.Generator,
                 stripe_axis: int) -> Array:
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    if spec.shape == "blob":
        d = int(rng.integers(spec.size[0], spec.size[1] + 1))
        a = d / 2.0
        b = d / 2.0 * rng.uniform(0.6, 1.0)
        cy = rng.uniform(a, size - a)
        cx = rng.uniform(a, size - a)
        mask[((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0] = 1
    elif spec.shape == "scratch":
        length = int(rng.integers(spec.size[0], spec.size[1] + 1))
        theta = rng.uniform(0.0, np.pi)
        cy = rng.uniform(length / 2, size - length / 2)
        cx = rng.uniform(length / 2, size - length / 2)
        width = float(rng.integers(1, 3))
        # distance from each pixel to the segment through (cy, cx)
        dy, dx = np.sin(theta), np.cos(theta)
        t = (yy - cy) * dy + (xx - cx) * dx
        t = np.clip(t, -length / 2, length / 2)
        dist2 = (yy - cy - t * dy) ** 2 + (xx - cx - t * dx) ** 2
        mask[dist2 <= (width / 2.0 + 0.5) ** 2] = 1
    else:  # band crossing the stripes, so it interrupts the texture
        thickness = int(rng.integers(spec.size[0], spec.size[1] + 1))
        start = int(rng.integers(0, size - thickness + 1))
        if stripe_axis == 0:
            mask[start:start + thickness, :] = 1
        else:
            mask[:, start:start + thickness] = 1
    return mask


def gen_texture_images(cfg: TextureGenConfig) -> list[TextureSample]:
    """Normal gratings plus one defect family per anomaly class, with masks."""
    rng = np.random.default_rng(cfg.seed)
    out: list[TextureSample] = []
    for i in range(cfg.n_normal):
        axis = int(rng.integers(0, 2))
        img = _grating(cfg.image_size, rng, cfg.noise_std, axis)
        out.append(TextureSample(image_id=f"tn{i:05d}", image=img, y=0))
    serial = 0
    for class_id, spec in enumerate(cfg.defects):
        for _ in range(cfg.n_per_defect):
            axis = int(rng.integers(0, 2))
            img = _grating(cfg.image_size, rng, cfg.noise_std, axis)
            mask = _defect_mask(spec, cfg.image_size, rng, axis)
            img = img + spec.intensity * mask
            out.append(TextureSample(image_id=f"ta{serial:05d}", image=img, y=1,
                                     class_id=class_id, mask=mask))
            serial += 1
    return out


def extract_patches(image: Array, patch: int, stride: int, image_id: str = "img",
                    y: int = 0, class_id: int | None = None,
                    mask: Array | None = None) -> Bag:
    """Sliding windows, flattened and standardized per patch (std floored)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"image must be 2-d, got shape {img.shape}")
    h, w = img.shape
    if patch < 1 or patch > min(h, w):
        raise ContractError(f"patch {patch} does not fit a {h}x{w} image")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    rows = (h - patch) // stride + 1
    cols = (w - patch) // stride + 1
    if rows < 1 or cols < 1:
        raise ContractError("patch/stride produce zero windows")
    feats = np.empty((rows * cols, patch * patch))
    j = 0
    for r in range(rows):
        for c in range(cols):
            win = img[r * stride:r * stride + patch, c * stride:c * stride + patch].ravel()
            feats[j] = (win - win.mean()) / max(win.std(), STD_FLOOR)
            j += 1
    geom = Geometry(image_id=image_id, height=h, width=w, patch=patch, stride=stride)
    return Bag(id=image_id, instances=feats, y=y, class_id=class_id,
               geometry=geom, mask=mask)


def texture_bags(cfg: TextureGenConfig) -> list[Bag]:
    """Generate texture images and turn each into a patch bag."""
    return [extract_patches(s.image, cfg.patch, cfg.stride, image_id=s.image_id,
                            y=s.y, class_id=s.class_id, mask=s.mask)
            for s in gen_texture_images(cfg)]


# ---- splits ---------------------------------------------------------------


@dataclass
class SplitSpec:
    """Few-shot split protocol knobs."""
    mode: str = "random"               # "random" or "open-set"
    n_labeled: int = 10
    seen_class: int | None = None      # open-set only
    contamination: float = 0.0         # fraction of the normal pool, <= 0.2
    test_normal_fraction: float = 0.25
    seed: int = 0
    allow_high_contamination: bool = False

    def __post_init__(self):
        if self.mode not in ("random", "open-set"):
            raise ConfigError(f"mode must be 'random' or 'open-set', got {self.mode!r}")
        if self.n_labeled < 1:
            raise ConfigError("n_labeled must be >= 1")
        if self.mode == "open-set" and self.seen_class is None:
            raise ConfigError("open-set mode needs seen_class")
        if not 0.0 <= self.contamination <= 1.0:
            raise ConfigError(f"contamination must lie in [0, 1], got {self.contamination}")
        if self.contamination > CONTAMINATION_CAP and not self.allow_high_contamination:
            raise ConfigError(f"contamination {self.contamination} exceeds the "
                              f"{CONTAMINATION_CAP} cap; pass allow_high_contamination to override")
        if not 0.0 < self.test_normal_fraction < 1.0:
            raise ConfigError("test_normal_fraction must lie in (0, 1)")


@dataclass
class Split:
    """Training pools and the held-out test set."""
    x_n: list[Bag] = field(default_factory=list)   # normals (may hide contaminants)
    x_a: list[Bag] = field(default_factory=list)   # labeled anomalies
    test: list[Bag] = field(default_factory=list)


def make_split(bags: list[Bag], spec: SplitSpec) -> Split:
    """Partition a labeled pool into X_n, X_a and a test set per the protocol.

    Open-set mode labels anomalies from `seen_class` only and drops that
    class's remaining samples from the test set entirely.  Contamination
    moves `round(rate * |X_n|)` anomalies into the normal pool relabeled 0
    (class ids retained) and out of the test set.
    """
    rng = np.random.default_rng(spec.seed)
    normals = [b for b in bags if b.y == 0]
    anomalies = [b for b in bags if b.y == 1]
    if not normals or not anomalies:
        raise ContractError(f"need both classes, got {len(normals)} normals, {len(anomalies)} anomalies")

    perm = rng.permutation(len(normals))
    n_test = round(spec.test_normal_fraction * len(normals))
    n_test = min(max(n_test, 1), len(normals) - 1)
    test_normals = [normals[i] for i in perm[:n_test]]
    train_normals = [normals[i] for i in perm[n_test:]]

    if spec.mode == "open-set":
        candidates = [i for i, b in enumerate(anomalies) if b.class_id == spec.seen_class]
        if not candidates:
            raise ContractError(f"no anomalies with class_id == {spec.seen_class}")
    else:
        candidates = list(range(len(anomalies)))
    if len(candidates) < spec.n_labeled:
        raise ContractError(f"need {spec.n_labeled} labeled anomalies, only "
                            f"{len(candidates)} candidates available")
    picked = rng.permutation(len(candidates))[:spec.n_labeled]
    labeled_idx = {candidates[i] for i in picked}
    x_a = [anomalies[i] for i in sorted(labeled_idx)]

    if spec.mode == "open-set":
        rest_idx = [i for i, b in enumerate(anomalies)
                    if i not in labeled_idx and b.class_id != spec.seen_class]
    else:
        rest_idx = [i for i in range(len(anomalies)) if i not in labeled_idx]

    n_cont = round(spec.contamination * len(train_normals))
    contaminants: list[Bag] = []
    if n_cont > 0:
        if n_cont > len(rest_idx):
            raise ContractError(f"contamination needs {n_cont} anomalies, only "
                                f"{len(rest_idx)} remain")
        picked_c = rng.permutation(len(rest_idx))[:n_cont]
        chosen = {rest_idx[i] for i in picked_c}
        contaminants = [dataclasses.replace(anomalies[i], y=0) for i in sorted(chosen)]
        rest_idx = [i for i in rest_idx if i not in chosen]

    test = test_normals + [anomalies[i] for i in rest_idx]
    return Split(x_n=train_normals + contaminants, x_a=x_a, test=test)
