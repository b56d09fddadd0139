"""Procedural face-proxy images with known identity, liveness and style factors.

Identity fixes a smooth colour field, a few landmark blobs and a fine skin
texture.  Spoofs overlay an attack artifact (lattice, moire, blur, speckle).
Style (brightness, contrast, hue, blur, noise) is applied globally last and
its ranges differ per synthetic domain.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from dlif.tensor import dlif_io

log = logging.getLogger(__name__)

ATTACK_TYPES = ("grid", "moire", "blur", "noise")
STYLE_KEYS = ("brightness", "contrast", "hue", "blur", "noise")
LIVENESS_NAMES = ("live", "spoof")
GRID_PERIOD = 4
_IDENTITY_SALT = 0x1D
MANIFEST_NAME = "manifest.csv"

# (lo, hi) per style parameter, indexed by domain tag; hue in degrees, blur in pixels
DEFAULT_STYLE_RANGES: dict[int, dict[str, tuple[float, float]]] = {
    0: {"brightness": (-0.05, 0.05), "contrast": (0.9, 1.1), "hue": (5.0, 25.0),
        "blur": (0.0, 0.3), "noise": (0.0, 0.01)},
    1: {"brightness": (-0.10, 0.00), "contrast": (0.8, 1.0), "hue": (-25.0, -5.0),
        "blur": (0.4, 0.8), "noise": (0.0, 0.02)},
    2: {"brightness": (0.00, 0.10), "contrast": (1.0, 1.2), "hue": (-10.0, 10.0),
        "blur": (0.0, 0.3), "noise": (0.02, 0.04)},
    3: {"brightness": (-0.15, -0.05), "contrast": (1.1, 1.3), "hue": (30.0, 50.0),
        "blur": (0.2, 0.5), "noise": (0.01, 0.03)},
}


@dataclass(frozen=True)
class Style:
    brightness: float = 0.0
    contrast: float = 1.0
    hue: float = 0.0
    blur: float = 0.0
    noise: float = 0.0


@dataclass
class SampleRecord:
    image: np.ndarray
    identity_id: int
    liveness: str
    attack_type: str
    style: Style
    domain_tag: int = 0


def _check_attack(liveness: str, attack_type: str) -> None:
    if liveness not in LIVENESS_NAMES:
        raise ValueError(f"liveness must be one of {LIVENESS_NAMES}, got {liveness!r}")
    if (liveness == "live") != (attack_type == "none"):
        raise ValueError(f"inconsistent liveness/attack pair: {liveness}/{attack_type}")
    if attack_type != "none" and attack_type not in ATTACK_TYPES:
        raise ValueError(f"unknown attack type {attack_type!r}")


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def identity_render(identity_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Identity pattern with a small per-sample jitter drawn from ``rng``."""
    irng = np.random.default_rng([_IDENTITY_SALT, int(identity_id)])
    base = irng.uniform(0.3, 0.7, size=3)
    coarse = irng.normal(0.0, 0.15, size=(3, 4, 4))
    field_ = ndimage.zoom(coarse, (1, size / 4, size / 4), order=3, mode="nearest")
    img = base[:, None, None] + field_
    yy, xx = _grid(size)
    n_blobs = int(irng.integers(2, 4))
    centers = irng.uniform(0.2, 0.8, size=(n_blobs, 2))
    sigmas = irng.uniform(0.06, 0.12, size=n_blobs) * size
    colors = irng.uniform(-0.35, 0.35, size=(n_blobs, 3))
    jitter = rng.uniform(-0.03, 0.03, size=(n_blobs, 2))
    for (cy, cx), (jy, jx), s, col in zip(centers, jitter, sigmas, colors):
        blob = np.exp(-(((yy - (cy + jy) * size) ** 2 + (xx - (cx + jx) * size) ** 2) / (2 * s * s)))
        img += col[:, None, None] * blob
    return img


def apply_attack(img: np.ndarray, attack_type: str, rng: np.random.Generator,
                 strength: float = 1.0) -> np.ndarray:
    """Overlay one artifact; ``strength`` scales additive amplitudes and blur width."""
    size = img.shape[-1]
    yy, xx = _grid(size)
    phase = rng.uniform(0, 2 * np.pi, size=4)
    tint = rng.uniform(0.6, 1.0, size=3)
    if attack_type == "grid":
        lattice = 0.5 * (np.cos(2 * np.pi * xx / GRID_PERIOD + phase[0])
                         + np.cos(2 * np.pi * yy / GRID_PERIOD + phase[1]))
        return img + 0.24 * strength * tint[:, None, None] * lattice[None]
    if attack_type == "moire":
        t1, t2 = rng.uniform(-0.3, 0.3, size=2)
        g1 = np.cos(2 * np.pi * (xx * np.cos(t1) + yy * np.sin(t1)) / 3.4 + phase[2])
        g2 = np.cos(2 * np.pi * (xx * np.cos(t2 + 0.25) + yy * np.sin(t2 + 0.25)) / 3.7 + phase[3])
        return img + 0.28 * strength * tint[:, None, None] * (g1 * g2)[None]
    if attack_type == "blur":
        return ndimage.gaussian_filter(img, sigma=(0, 2.4 * strength, 2.4 * strength), mode="nearest")
    if attack_type == "noise":
        mask = rng.random((size, size)) < 0.08
        speckle = rng.choice([-0.5, 0.5], size=(size, size)) * mask * strength
        return img + speckle[None] * tint[:, None, None]
    return img


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB about the grey axis."""
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def apply_style(img: np.ndarray, style: Style, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, size=img.shape)
    mean = img.mean()
    out = (img - mean) * style.contrast + mean
    out = np.tensordot(_hue_matrix(style.hue), out, axes=(1, 0))
    if style.blur > 0:
        out = ndimage.gaussian_filter(out, sigma=(0, style.blur, style.blur), mode="nearest")
    out = out + style.brightness + style.noise * noise
    return np.clip(out, 0.0, 1.0)


def generate_sample(identity_id: int, liveness: str, attack_type: str, style: Style,
                    rng: np.random.Generator, size: int = 32, domain_tag: int = 0,
                    attack_strength: float = 1.0) -> SampleRecord:
    """Render one image; identical arguments and rng state give identical pixels."""
    _check_attack(liveness, attack_type)
    img = identity_render(identity_id, size, rng)
    if liveness == "spoof":
        img = apply_attack(img, attack_type, rng, attack_strength)
    img = apply_style(img, style, rng)
    return SampleRecord(img, int(identity_id), liveness, attack_type, style, int(domain_tag))


@dataclass
class DatasetSpec:
    n_domains: int = 3
    ids_per_domain: int = 12
    samples_per_id_per_liveness: int = 8
    image_size: int = 32
    seed: int = 0
    domain_offset: int = 0
    attack_strength: float = 1.0
    attack_mix: dict[str, float] = field(default_factory=lambda: {a: 1.0 for a in ATTACK_TYPES})
    style_ranges: dict[int, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_domains < 1 or self.ids_per_domain < 1 or self.samples_per_id_per_liveness < 1:
            raise ValueError("domain, identity and sample counts must be positive")
        if self.attack_strength <= 0:
            raise ValueError("attack_strength must be positive")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        unknown = set(self.attack_mix) - set(ATTACK_TYPES)
        if unknown or not self.attack_mix or min(self.attack_mix.values()) < 0 or sum(self.attack_mix.values()) <= 0:
            raise ValueError(f"attack_mix must weight a subset of {ATTACK_TYPES}")
        for tag in self.domain_tags:
            for key, (lo, hi) in self.ranges_for(tag).items():
                if lo > hi:
                    raise ValueError(f"style range {key} for domain {tag} has lo > hi")

    @property
    def domain_tags(self) -> list[int]:
        return [self.domain_offset + d for d in range(self.n_domains)]

    def ranges_for(self, tag: int) -> dict[str, tuple[float, float]]:
        base = DEFAULT_STYLE_RANGES[tag % len(DEFAULT_STYLE_RANGES)]
        return {**base, **self.style_ranges.get(tag, {})}

    def identity_ids(self, tag: int) -> range:
        start = tag * self.ids_per_domain
        return range(start, start + self.ids_per_domain)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "DatasetSpec":
        kwargs: dict = {}
        ranges: dict[int, dict[str, tuple[float, float]]] = {}
        ints = {"n_domains", "ids_per_domain", "samples_per_id_per_liveness", "image_size", "seed", "domain_offset"}
        for key, raw in values.items():
            if key in ints:
                kwargs[key] = int(raw)
            elif key == "attack_strength":
                kwargs[key] = float(raw)
            elif key == "attack_mix":
                mix = {}
                for part in raw.split(","):
                    name, _, weight = part.strip().partition(":")
                    mix[name.strip()] = float(weight) if weight else 1.0
                kwargs["attack_mix"] = mix
            elif key.startswith("style."):
                _, tag, param = key.split(".")
                if param not in STYLE_KEYS:
                    raise ValueError(f"unknown style parameter {param!r}")
                lo, hi = (float(v) for v in raw.split(","))
                ranges.setdefault(int(tag), {})[param] = (lo, hi)
            else:
                valid = sorted(ints | {"attack_mix", "attack_strength", "style.<domain>.<param>"})
                raise ValueError(f"unknown dataset spec key {key!r}; valid keys: {', '.join(valid)}")
        return cls(style_ranges=ranges, **kwargs)


@dataclass
class ManifestRow:
    path: str
    identity_id: int
    liveness: str
    attack_type: str
    domain_tag: int
    brightness: float
    contrast: float
    hue: float
    blur: float
    noise: float

    @property
    def style(self) -> Style:
        return Style(self.brightness, self.contrast, self.hue, self.blur, self.noise)


MANIFEST_FIELDS = [f.name for f in fields(ManifestRow)]


def write_manifest(rows: list[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.path, r.identity_id, r.liveness, r.attack_type, r.domain_tag,
                        repr(r.brightness), repr(r.contrast), repr(r.hue), repr(r.blur), repr(r.noise)])


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"manifest header {reader.fieldnames} != {MANIFEST_FIELDS}")
        for rec in reader:
            rows.append(ManifestRow(
                rec["path"], int(rec["identity_id"]), rec["liveness"], rec["attack_type"], int(rec["domain_tag"]),
                *(float(rec[k]) for k in STYLE_KEYS)))
    return rows


def _draw_style(ranges: dict[str, tuple[float, float]], rng: np.random.Generator) -> Style:
    return Style(**{k: float(rng.uniform(*ranges[k])) for k in STYLE_KEYS})


def plan_dataset(spec: DatasetSpec) -> list[tuple[int, int, str, str, Style, int]]:
    """(index, identity, liveness, attack, style, domain) for every sample."""
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    names = sorted(spec.attack_mix)
    weights = np.array([spec.attack_mix[a] for a in names], dtype=np.float64)
    weights /= weights.sum()
    plan = []
    index = 0
    for tag in spec.domain_tags:
        ranges = spec.ranges_for(tag)
        for ident in spec.identity_ids(tag):
            for liveness in LIVENESS_NAMES:
                for _ in range(spec.samples_per_id_per_liveness):
                    attack = "none" if liveness == "live" else names[rng.choice(len(names), p=weights)]
                    plan.append((index, ident, liveness, attack, _draw_style(ranges, rng), tag))
                    index += 1
    return plan


def generate_dataset(spec: DatasetSpec, out_dir) -> list[ManifestRow]:
    """Render every sample to ``out_dir/images`` and write ``out_dir/manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for index, ident, liveness, attack, style, tag in plan_dataset(spec):
        rng = np.random.default_rng([spec.seed, index])
        rec = generate_sample(ident, liveness, attack, style, rng, spec.image_size, tag, spec.attack_strength)
        rel = f"images/{index:06d}.dlif"
        dlif_io.save(out_dir / rel, rec.image)
        rows.append(ManifestRow(rel, ident, liveness, attack, tag, style.brightness, style.contrast,
                                style.hue, style.blur, style.noise))
    write_manifest(rows, out_dir / MANIFEST_NAME)
    return rows


@dataclass
class SyntheticDataset:
    root: Path
    rows: list[ManifestRow]
    images: np.ndarray

    @property
    def identity(self) -> np.ndarray:
        return np.array([r.identity_id for r in self.rows], dtype=np.int64)

    @property
    def liveness(self) -> np.ndarray:
        """0 for live, 1 for spoof."""
        return np.array([LIVENESS_NAMES.index(r.liveness) for r in self.rows], dtype=np.int64)

    @property
    def domain(self) -> np.ndarray:
        return np.array([r.domain_tag for r in self.rows], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, indices) -> "SyntheticDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return SyntheticDataset(self.root, [self.rows[i] for i in indices], self.images[indices])


def load_dataset(directory, manifest: str | Path | None = None) -> SyntheticDataset:
    directory = Path(directory)
    manifest_path = Path(manifest) if manifest is not None else directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    rows = read_manifest(manifest_path)
    base = manifest_path.parent
    images = np.stack([dlif_io.load(base / r.path) for r in rows]) if rows else np.zeros((0, 3, 1, 1))
    return SyntheticDataset(base, rows, images)


def factor_report(rows: list[ManifestRow]) -> dict:
    """Exact-count independence check between identity and liveness labels."""
    ids = sorted({r.identity_id for r in rows})
    counts = np.zeros((len(ids), 2), dtype=np.int64)
    pos = {ident: k for k, ident in enumerate(ids)}
    for r in rows:
        counts[pos[r.identity_id], LIVENESS_NAMES.index(r.liveness)] += 1
    n = int(counts.sum())
    independent = bool(np.all(counts * n == np.outer(counts.sum(1), counts.sum(0))))
    joint = counts / n
    outer = np.outer(joint.sum(1), joint.sum(0))
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return {"n_samples": n, "n_identities": len(ids), "independent_by_count": independent,
            "mutual_information": 0.0 if independent else mi}


def domain_shift_report(dataset: SyntheticDataset, train_domain: int, test_domain: int) -> dict:
    """Liveness accuracy of a per-channel pixel-mean nearest-centroid rule across domains."""
    feats = dataset.images.mean(axis=(2, 3))
    live = dataset.liveness
    dom = dataset.domain
    tr = dom == train_domain
    centroids = np.stack([feats[tr & (live == k)].mean(axis=0) for k in (0, 1)])

    def acc(mask):
        d = ((feats[mask][:, None, :] - centroids[None]) ** 2).sum(-1)
        return float(np.mean(d.argmin(1) == live[mask]))

    a, b = acc(tr), acc(dom == test_domain)
    return {"train_domain": train_domain, "test_domain": test_domain,
            "accuracy_train_domain": a, "accuracy_test_domain": b, "degradation": a - b}


@dataclass
class AugmentConfig:
    enabled: bool = True
    scale: tuple[float, float] = (0.8, 1.0)
    rotation: float = 10.0


def random_resized_crop_rotate(img: np.ndarray, out_size: int, cfg: AugmentConfig,
                               rng: np.random.Generator) -> np.ndarray:
    """Crop a random square of area fraction in ``cfg.scale``, rotate, resize."""
    size = img.shape[-1]
    area = rng.uniform(*cfg.scale)
    theta = math.radians(rng.uniform(-cfg.rotation, cfg.rotation))
    side = math.sqrt(area) * size
    half = side / 2.0
    cy = rng.uniform(half, size - half) - 0.5
    cx = rng.uniform(half, size - half) - 0.5
    zoom = side / out_size
    c, s = math.cos(theta), math.sin(theta)
    matrix = zoom * np.array([[c, -s], [s, c]])
    mid = (out_size - 1) / 2.0
    offset = np.array([cy, cx]) - matrix @ np.array([mid, mid])
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, output_shape=(out_size, out_size),
                                 order=1, mode="reflect")
        for ch in img
    ])


def resize_images(images: np.ndarray, out_size: int) -> np.ndarray:
    if images.shape[-1] == out_size:
        return images
    f = out_size / images.shape[-1]
    return ndimage.zoom(images, (1, 1, f, f), order=1)


@dataclass
class Batch:
    images: np.ndarray
    identity: np.ndarray
    liveness: np.ndarray
    domain: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def sample_batch(dataset: SyntheticDataset, rng: np.random.Generator, ids_per_domain: int = 4,
                 live_per_id: int = 4, spoof_per_id: int = 4, augment: AugmentConfig | None = None,
                 input_size: int | None = None, eligible_ids=None) -> Batch:
    """Pick IDs per domain, then live and spoof faces per ID, and augment them."""
    identity, liveness, domain = dataset.identity, dataset.liveness, dataset.domain
    eligible = set(np.unique(identity) if eligible_ids is None else np.asarray(eligible_ids).tolist())
    chosen: list[int] = []
    for tag in np.unique(domain):
        ids = np.array(sorted({int(i) for i in identity[domain == tag] if int(i) in eligible}))
        if ids.size == 0:
            continue
        picked = rng.choice(ids, size=min(ids_per_domain, ids.size), replace=False)
        for ident in picked:
            for label, count in ((0, live_per_id), (1, spoof_per_id)):
                pool = np.flatnonzero((identity == ident) & (liveness == label))
                replace = pool.size < count
                if replace:
                    log.warning("identity %d has %d %s samples, need %d; sampling with replacement",
                                ident, pool.size, LIVENESS_NAMES[label], count)
                if pool.size == 0:
                    raise ValueError(f"identity {ident} has no {LIVENESS_NAMES[label]} samples")
                chosen.extend(rng.choice(pool, size=count, replace=replace).tolist())
    idx = np.asarray(chosen, dtype=np.intp)
    out_size = input_size or dataset.images.shape[-1]
    augment = augment or AugmentConfig(enabled=False)
    if augment.enabled:
        images = np.stack([random_resized_crop_rotate(dataset.images[i], out_size, augment, rng) for i in idx])
    else:
        images = resize_images(dataset.images[idx], out_size)
    return Batch(images, identity[idx], liveness[idx], domain[idx], idx)

