"""Procedural multi-domain person-search datasets.

Scenes are 64x64 RGB images in [0,1]: a textured, palette-colored background
with 1-4 pasted person glyphs. A glyph is a deterministic 8x8 color pattern
derived from its identity id, rendered with per-instance scale/brightness
jitter. Domain shift is controlled by a separation knob that interpolates
palettes and textures between a shared ambiguous style and distinct ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .detection import Box, iou

IMAGE_SIZE = 64
GLYPH_SIZE = 8
MIN_BOX = 6
CORPUS_ID_BASE = 10 ** 6

_DISTINCT_PALETTES = [
    [(0.85, 0.25, 0.20), (0.95, 0.55, 0.35), (0.65, 0.15, 0.25)],
    [(0.20, 0.75, 0.30), (0.35, 0.90, 0.55), (0.10, 0.55, 0.25)],
    [(0.20, 0.35, 0.90), (0.40, 0.55, 0.95), (0.15, 0.20, 0.65)],
    [(0.90, 0.85, 0.25), (0.95, 0.95, 0.55), (0.70, 0.65, 0.15)],
]
_BASE_PALETTE = [(0.50, 0.50, 0.50), (0.55, 0.55, 0.55), (0.45, 0.45, 0.45)]
_TEXTURES = ["flat", "stripes", "checker", "stripes"]


class SpecError(ValueError):
    """Raised for invalid domain specifications."""


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    background_palette: tuple
    noise_level: float = 0.02
    texture: str = "flat"
    person_scale_range: tuple = (8, 16)
    identity_count: int = 20
    separation: float = 1.0

    def __post_init__(self):
        if self.identity_count < 2:
            raise SpecError(f"identity_count must be >= 2, got {self.identity_count}")
        if self.texture not in ("flat", "stripes", "checker"):
            raise SpecError(f"unknown texture {self.texture!r}")


@dataclass(frozen=True)
class DatasetSizes:
    train_scenes: int = 200
    test_scenes: int = 100
    queries: int = 30
    gallery_size: int = 50


@dataclass
class SceneSample:
    image: np.ndarray
    boxes: list
    identities: list
    domain_id: int


@dataclass(frozen=True)
class Query:
    scene_index: int
    box_index: int
    identity: int


@dataclass
class DomainData:
    spec: DomainSpec
    seed: int
    train: list
    test: list
    queries: list
    galleries: list  # per query: list of test-scene indices
    train_ids: list
    test_ids: list
    gallery_size: int

    def label_of(self, identity):
        """Contiguous training label for an identity (for the OIM table)."""
        return self.train_ids.index(identity)


def default_domain_specs(num_domains, separation=1.0, identity_count=20):
    """Domain styles interpolated between a shared base and distinct looks."""
    specs = []
    mix = max(float(separation), 0.02)  # distinct domains always differ slightly
    for i in range(num_domains):
        distinct = _DISTINCT_PALETTES[i % len(_DISTINCT_PALETTES)]
        palette = tuple(
            tuple((1 - mix) * b + mix * d for b, d in zip(base, dst))
            for base, dst in zip(_BASE_PALETTE, distinct)
        )
        texture = _TEXTURES[i % len(_TEXTURES)] if separation >= 0.5 else "flat"
        specs.append(DomainSpec(
            domain_id=i,
            background_palette=palette,
            texture=texture,
            identity_count=identity_count,
            separation=separation,
        ))
    return specs


def glyph_for(identity):
    """Deterministic 8x8x3 stamp for an identity."""
    rng = np.random.default_rng(np.random.SeedSequence([9973, int(identity)]))
    c1 = rng.uniform(0.1, 1.0, size=3)
    c2 = rng.uniform(0.0, 0.9, size=3)
    mask = rng.random((GLYPH_SIZE, GLYPH_SIZE)) < 0.5
    glyph = np.where(mask[:, :, None], c1[None, None, :], c2[None, None, :])
    return glyph


def _glyph_gain(spec):
    """Per-channel domain palette transform applied to rendered glyphs.

    At zero separation the palette is neutral gray and the gain is exactly 1,
    so ambiguous domains render identities identically.
    """
    return 0.5 + np.asarray(spec.background_palette[0])


def _render_background(spec, rng):
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    p = [np.asarray(c) for c in spec.background_palette]
    if spec.texture == "flat":
        img[:] = p[0]
    elif spec.texture == "stripes":
        for r in range(0, IMAGE_SIZE, 4):
            img[r:r + 4] = p[(r // 4) % 3]
    else:  # checker
        ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
        cells = ((ys // 8) + (xs // 8)) % 2
        img[:] = np.where(cells[:, :, None] == 0, p[0][None, None, :], p[1][None, None, :])
    img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_scene(spec, identity_pool, rng):
    """One scene with 1-4 non-overlapping person glyphs from identity_pool."""
    img = _render_background(spec, rng)
    n = int(rng.integers(1, 5))
    boxes, ids = [], []
    for _ in range(n):
        identity = int(rng.choice(identity_pool))
        for _attempt in range(30):
            lo, hi = spec.person_scale_range
            s = int(rng.integers(max(lo, MIN_BOX), hi + 1))
            x0 = int(rng.integers(0, IMAGE_SIZE - s + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - s + 1))
            cand = Box(float(x0), float(y0), float(x0 + s), float(y0 + s))
            if all(iou(cand, b) < 0.2 for b in boxes):
                glyph = glyph_for(identity)
                idxm = (np.arange(s) * GLYPH_SIZE) // s
                patch = glyph[np.ix_(idxm, idxm)] * _glyph_gain(spec) * rng.uniform(0.8, 1.2)
                img[y0:y0 + s, x0:x0 + s] = np.clip(patch, 0.0, 1.0)
                boxes.append(cand)
                ids.append(identity)
                break
    return SceneSample(image=img, boxes=boxes, identities=ids, domain_id=spec.domain_id)


def make_separated_scene(spec, identity_pool, rng, n_persons=3, gap=6):
    """Scene with exactly n_persons glyphs whose boxes keep a pixel gap.

    Used for detection fixtures where persons must be well separated; the
    regular generator allows near-touching boxes (IoU up to 0.2).
    """
    img = _render_background(spec, rng)
    boxes, ids = [], []
    while len(boxes) < n_persons:
        identity = int(rng.choice(identity_pool))
        for _attempt in range(100):
            lo, hi = spec.person_scale_range
            s = int(rng.integers(max(lo, MIN_BOX), hi + 1))
            x0 = int(rng.integers(0, IMAGE_SIZE - s + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - s + 1))
            cand = Box(float(x0), float(y0), float(x0 + s), float(y0 + s))
            grown = Box(cand.x1 - gap, cand.y1 - gap, cand.x2 + gap, cand.y2 + gap)
            if all(iou(grown, b) == 0.0 for b in boxes):
                glyph = glyph_for(identity)
                idxm = (np.arange(s) * GLYPH_SIZE) // s
                patch = glyph[np.ix_(idxm, idxm)] * _glyph_gain(spec) * rng.uniform(0.8, 1.2)
                img[y0:y0 + s, x0:x0 + s] = np.clip(patch, 0.0, 1.0)
                boxes.append(cand)
                ids.append(identity)
                break
        else:
            break
    return SceneSample(image=img, boxes=boxes, identities=ids, domain_id=spec.domain_id)


def make_domain(spec, seed, sizes=DatasetSizes()):
    """Deterministic train/test/query split with disjoint identity sets."""
    if spec.identity_count < 2:
        raise SpecError("identity_count must be >= 2")
    base = spec.domain_id * 1000
    all_ids = [base + i for i in range(spec.identity_count)]
    n_train = max(1, int(round(spec.identity_count * 0.6)))
    n_train = min(n_train, spec.identity_count - 1)
    train_ids, test_ids = all_ids[:n_train], all_ids[n_train:]

    train = [
        make_scene(spec, train_ids,
                   np.random.default_rng(np.random.SeedSequence([seed, spec.domain_id, 0, i])))
        for i in range(sizes.train_scenes)
    ]
    test = [
        make_scene(spec, test_ids,
                   np.random.default_rng(np.random.SeedSequence([seed, spec.domain_id, 1, i])))
        for i in range(sizes.test_scenes)
    ]

    # index test scenes by identity to guarantee non-empty galleries
    scenes_with = {}
    for si, scene in enumerate(test):
        for identity in set(scene.identities):
            scenes_with.setdefault(identity, []).append(si)

    qrng = np.random.default_rng(np.random.SeedSequence([seed, spec.domain_id, 2]))
    candidates = []
    for si, scene in enumerate(test):
        for bi, identity in enumerate(scene.identities):
            if len(scenes_with.get(identity, [])) >= 2:
                candidates.append(Query(si, bi, identity))
    order = qrng.permutation(len(candidates))
    queries, galleries, used = [], [], set()
    for oi in order:
        q = candidates[int(oi)]
        key = (q.scene_index, q.identity)
        if key in used:
            continue
        used.add(key)
        positives = [si for si in scenes_with[q.identity] if si != q.scene_index]
        others = [si for si in range(len(test)) if si != q.scene_index and si not in positives]
        fill = qrng.permutation(others)[:max(0, sizes.gallery_size - len(positives))]
        gallery = sorted(positives + [int(s) for s in fill])[:sizes.gallery_size]
        queries.append(q)
        galleries.append(gallery)
        if len(queries) >= sizes.queries:
            break

    return DomainData(spec=spec, seed=seed, train=train, test=test,
                      queries=queries, galleries=galleries,
                      train_ids=train_ids, test_ids=test_ids,
                      gallery_size=sizes.gallery_size)


def make_detection_corpus(seed, size, num_styles=3):
    """Mixed-style, fresh-identity scenes for detection pre-training."""
    if size < 1:
        raise SpecError("corpus size must be >= 1")
    styles = default_domain_specs(num_styles, separation=1.0)
    scenes = []
    for i in range(size):
        spec = styles[i % num_styles]
        ids = [CORPUS_ID_BASE + 4 * i + k for k in range(4)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5, i]))
        scenes.append(make_scene(spec, ids, rng))
    return scenes


def domain_separation_probe(encode, scenes_a, scenes_b):
    """Mean pairwise cosine distance between frozen embeddings of two sets."""
    qa = np.stack([np.asarray(encode(s.image)) for s in scenes_a])
    qb = np.stack([np.asarray(encode(s.image)) for s in scenes_b])
    qa = qa / np.linalg.norm(qa, axis=1, keepdims=True)
    qb = qb / np.linalg.norm(qb, axis=1, keepdims=True)
    sims = qa @ qb.T
    return float(np.mean(1.0 - sims))


# -- dataset export -----------------------------------------------------------


def write_image_bin(path, image):
    """Portable binary array: uint32 LE rank + dims, then float32 LE data."""
    arr = np.asarray(image, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_image_bin(path):
    with open(path, "rb") as fh:
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape)


def export_domain(domain, out_dir):
    """One directory per domain: image .bin files + line-delimited records."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "annotations.jsonl", "w") as fh:
        for split, scenes in (("train", domain.train), ("test", domain.test)):
            for si, scene in enumerate(scenes):
                write_image_bin(out_dir / f"{split}_{si:04d}.bin", scene.image)
                for box, identity in zip(scene.boxes, scene.identities):
                    rec = {"scene": si, "split": split,
                           "box": list(box.as_tuple()), "identity": identity}
                    fh.write(json.dumps(rec) + "\n")
