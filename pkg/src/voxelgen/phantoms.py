"""Procedural phantom volumes and templated reports.

Each finding class has a fixed geometric signature (versioned catalog below),
so labels are recoverable by construction. Phantoms and reports are pure
functions of (labels, seed).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .volumes import CtVolume, Domain, save_volume

CATALOG_VERSION = 1

# (name, geometry kind, intensity delta above local background)
FINDING_CATALOG: tuple[tuple[str, str, float], ...] = (
    ("lung nodule", "sphere", 0.35),
    ("pleural effusion", "basal_layer", 0.30),
    ("arterial calcification", "shell", 0.40),
    ("consolidation", "block", 0.25),
    ("cardiomegaly", "central_ellipsoid", 0.30),
    ("atelectasis", "band", 0.28),
)

DEFAULT_K = 6

BODY_LEVEL = 0.35
BACKGROUND_NOISE = 0.02

_POSITIVE_TEMPLATES = (
    "there is a {name}.",
    "this scan shows signs of {name}.",
    "{name} is present.",
)
_NEGATIVE_TEMPLATES = (
    "no {name}.",
    "this scan does not show signs of {name}.",
    "there is no {name}.",
)


@dataclass(frozen=True)
class Finding:
    class_index: int
    kind: str
    center: tuple[float, float, float]
    radius: float
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, int, int]
    noise_level: float
    findings: tuple[Finding, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class Report:
    text: str
    labels: np.ndarray
    seed: int


def class_names(num_classes: int = DEFAULT_K) -> list[str]:
    if not 1 <= num_classes <= len(FINDING_CATALOG):
        raise ValueError(f"num_classes must be in [1, {len(FINDING_CATALOG)}]")
    return [name for name, _, _ in FINDING_CATALOG[:num_classes]]


def _item_rng(labels: np.ndarray, seed: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [int(b) for b in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _coord_grids(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def finding_mask(spec: PhantomSpec, finding: Finding) -> np.ndarray:
    """Boolean voxel mask of one finding's region (oracle for tests/eval)."""
    gx, gy, gz = _coord_grids(spec.grid)
    cx, cy, cz = finding.center
    r = finding.radius
    if finding.kind == "sphere":
        return (gx - cx) ** 2 + (gy - cy) ** 2 + (gz - cz) ** 2 <= r ** 2
    if finding.kind == "shell":
        d2 = (gx - cx) ** 2 + (gy - cy) ** 2 + (gz - cz) ** 2
        return (d2 <= r ** 2) & (d2 >= (0.6 * r) ** 2)
    if finding.kind == "basal_layer":
        return gz <= r
    if finding.kind == "block":
        return (np.abs(gx - cx) <= r) & (np.abs(gy - cy) <= r) & (np.abs(gz - cz) <= r)
    if finding.kind == "central_ellipsoid":
        h, w, d = spec.grid
        return ((gx - h / 2) / (1.6 * r)) ** 2 + ((gy - w / 2) / (1.3 * r)) ** 2 \
            + ((gz - d / 2) / r) ** 2 <= 1.0
    if finding.kind == "band":
        return np.abs(gy - cy) <= r * 0.5
    raise ValueError(f"unknown finding kind {finding.kind!r}")


def _body_mask(shape) -> np.ndarray:
    gx, gy, gz = _coord_grids(shape)
    h, w, d = shape
    return ((gx - (h - 1) / 2) / (0.45 * h)) ** 2 \
        + ((gy - (w - 1) / 2) / (0.45 * w)) ** 2 \
        + ((gz - (d - 1) / 2) / (0.48 * d)) ** 2 <= 1.0


def generate_phantom(labels, seed: int,
                     grid: tuple[int, int, int] = (32, 32, 32),
                     spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
                     ) -> tuple[CtVolume, PhantomSpec]:
    """Deterministic phantom: smooth body ellipse + noise + one geometric
    finding per active label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be a binary vector")
    if len(labels) > len(FINDING_CATALOG):
        raise ValueError(f"at most {len(FINDING_CATALOG)} classes supported")
    h, w, d = grid

    # independent streams: background depends on seed only, each finding on
    # (seed, class); toggling one label leaves everything else unchanged
    bg_rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xB0D7]))
    vox = np.full(grid, 0.02, dtype=np.float64)
    body = _body_mask(grid)
    vox[body] = BODY_LEVEL
    vox += bg_rng.normal(0.0, BACKGROUND_NOISE, size=grid)

    findings = []
    min_dim = min(grid)
    for k in np.flatnonzero(labels):
        name, kind, delta = FINDING_CATALOG[k]
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xF1AD, int(k)]))
        r = float(rng.uniform(0.10, 0.16) * min_dim)
        margin = r + 1.0
        center = tuple(float(rng.uniform(margin, n - 1 - margin)) for n in grid)
        if kind == "basal_layer":
            r = float(rng.uniform(0.12, 0.18) * d)
        finding = Finding(int(k), kind, center, r, delta)
        spec_partial = PhantomSpec(grid, BACKGROUND_NOISE, (finding,))
        mask = finding_mask(spec_partial, finding)
        vox[mask] += delta
        findings.append(finding)

    vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
    spec = PhantomSpec(grid, BACKGROUND_NOISE, tuple(findings))
    return CtVolume(vox, spacing, Domain.NORMALIZED), spec


def generate_report(labels, seed: int) -> Report:
    """Deterministic templated report: every positive finding stated, a
    sampled subset of absent findings negated."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = _item_rng(labels, seed + 0x5EED)
    names = class_names(len(labels))
    sentences = []
    for k, name in enumerate(names):
        if labels[k] == 1:
            tpl = _POSITIVE_TEMPLATES[rng.integers(len(_POSITIVE_TEMPLATES))]
            sentences.append(tpl.format(name=name))
        elif rng.random() < 0.5:
            tpl = _NEGATIVE_TEMPLATES[rng.integers(len(_NEGATIVE_TEMPLATES))]
            sentences.append(tpl.format(name=name))
    if not sentences:
        k = int(rng.integers(len(names)))
        sentences.append(_NEGATIVE_TEMPLATES[0].format(name=names[k]))
    return Report(" ".join(sentences), labels.copy(), int(seed))


def lexicon(num_classes: int = DEFAULT_K) -> set[str]:
    """The closed vocabulary every generated report draws from."""
    words: set[str] = set()
    for tpl in _POSITIVE_TEMPLATES + _NEGATIVE_TEMPLATES:
        words |= set(re.findall(r"[a-z0-9]+", tpl.format(name="")))
    for name in class_names(num_classes):
        words |= set(name.split())
    return words


def item_seed(base_seed: int, index: int) -> int:
    """Stable per-item seed derived from (base_seed, index)."""
    state = np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)
    return int(state[0])


def sample_labels(rng: np.random.Generator, num_classes: int,
                  prevalence: float = 0.35) -> np.ndarray:
    return (rng.random(num_classes) < prevalence).astype(np.int64)


def make_corpus(out_dir: str | os.PathLike, size: int, num_classes: int,
                grid: tuple[int, int, int], base_seed: int,
                prevalence: float = 0.35) -> str:
    """Generate phantom volumes + reports and write a line-delimited manifest.

    Returns the manifest path. Each record carries the volume path, report
    text, label vector, and per-item seed.
    """
    out_dir = str(out_dir)
    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    label_rng = np.random.default_rng(np.random.SeedSequence([int(base_seed), 0xC0751]))
    with open(manifest_path, "w") as f:
        for i in range(size):
            labels = sample_labels(label_rng, num_classes, prevalence)
            seed = item_seed(base_seed, i)
            vol, _ = generate_phantom(labels, seed, grid=grid)
            report = generate_report(labels, seed)
            rel = os.path.join("volumes", f"{i:06d}.vox")
            save_volume(vol, os.path.join(out_dir, rel))
            rec = {"id": f"{i:06d}", "volume": rel, "text": report.text,
                   "labels": [int(b) for b in labels], "seed": seed}
            f.write(json.dumps(rec) + "\n")
    return manifest_path


def read_manifest(manifest_path: str | os.PathLike) -> list[dict]:
    records = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
