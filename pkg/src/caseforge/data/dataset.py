"""Synthetic clothing-change dataset: generation, on-disk manifest, loading."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import (ChecksumMismatchError, ConfigError, DatasetError, ImageShapeError,
                      MissingFileError, SplitLeakageError)
from .render import Outfit, ShapeParams, make_outfits, render_person, shape_grid_levels

log = logging.getLogger(__name__)

MANIFEST_VERSION = "1"
SPLITS = ("train", "query", "gallery")


@dataclass
class GeneratorConfig:
    ids_train: int = 50
    ids_test: int = 50
    clothing_variants: int = 3      # outfits per test identity; train identities keep one
    poses: int = 10
    views: int = 6
    height: int = 64
    width: int = 32
    delta_shape: float = 0.25       # minimum L-inf gap between identities, unit-cube coordinates
    palette_hues: int = 8
    stripe_prob: float = 0.25
    luma_jitter: float = 0.03
    noise_amplitude: float = 0.03
    queries_per_clothing: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        from ..config import strict_fields
        return cls(**strict_fields(cls, d, "data"))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.ids_train >= 2, f"ids_train must be >= 2 (got {self.ids_train})")
        need(self.ids_test >= 1, f"ids_test must be >= 1 (got {self.ids_test})")
        need(self.clothing_variants >= 2,
             f"clothing_variants must be >= 2 so test identities change clothes (got {self.clothing_variants})")
        need(self.poses >= 1 and self.views >= 1, "poses and views must be >= 1")
        need(self.poses * self.views >= 2,
             f"poses * views must be >= 2 for positives and pose pairs (got {self.poses * self.views})")
        need(self.queries_per_clothing >= 1, "queries_per_clothing must be >= 1")
        need(self.queries_per_clothing < self.poses * self.views,
             f"queries_per_clothing={self.queries_per_clothing} leaves no gallery images "
             f"(poses * views = {self.poses * self.views})")
        need(self.height >= 8 and self.width >= 4, f"image size {self.height}x{self.width} too small")
        need(self.palette_hues >= 2, "palette_hues must be >= 2")
        n_outfits = self.palette_hues ** 2
        need(self.clothing_variants <= n_outfits,
             f"clothing_variants={self.clothing_variants} exceeds the {n_outfits} outfits of a "
             f"{self.palette_hues}-hue palette")
        need(0 <= self.stripe_prob <= 1, "stripe_prob must be in [0, 1]")
        need(0 <= self.luma_jitter <= 0.1, "luma_jitter must be in [0, 0.1]")
        try:
            levels = shape_grid_levels(self.delta_shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        capacity = levels ** len(fields(ShapeParams))
        total = self.ids_train + self.ids_test
        need(total <= capacity,
             f"{total} identities requested but delta_shape={self.delta_shape} admits only "
             f"{capacity} distinct shapes ({levels} levels per parameter)")


@dataclass
class SampleRecord:
    path: str
    identity_id: int
    clothing_id: int
    pose_id: int
    view_id: int
    split: str
    sha256: str = ""


@dataclass
class DatasetManifest:
    version: str
    counts: dict
    samples: list
    seed: int
    generator: dict
    identities: dict = field(default_factory=dict)   # identity_id -> shape params
    outfits: list = field(default_factory=list)
    root: Path | None = field(default=None, compare=False, repr=False)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "counts": self.counts,
            "seed": self.seed,
            "generator": self.generator,
            "identities": {str(k): v for k, v in self.identities.items()},
            "outfits": self.outfits,
            "samples": [asdict(s) for s in self.samples],
        }

    @classmethod
    def from_json(cls, d: dict, root=None) -> "DatasetManifest":
        return cls(
            version=str(d["version"]),
            counts=dict(d["counts"]),
            samples=[SampleRecord(**s) for s in d["samples"]],
            seed=int(d["seed"]),
            generator=dict(d["generator"]),
            identities={int(k): v for k, v in d.get("identities", {}).items()},
            outfits=list(d.get("outfits", [])),
            root=Path(root) if root is not None else None,
        )

    @property
    def image_size(self) -> tuple:
        return int(self.generator["height"]), int(self.generator["width"])

    def records(self, split: str) -> list:
        return [s for s in self.samples if s.split == split]

    def identity_set(self, split: str) -> set:
        return {s.identity_id for s in self.samples if s.split == split}

    def train_labels(self) -> dict:
        """Contiguous class index for every training identity."""
        return {pid: k for k, pid in enumerate(sorted(self.identity_set("train")))}

    def images(self, split: str) -> np.ndarray:
        """All images of a split as an ``(N, H, W, 3)`` float32 array (cached)."""
        if split not in self._cache:
            if self.root is None:
                raise DatasetError("manifest has no root directory; cannot read images")
            recs = self.records(split)
            h, w = self.image_size
            arr = np.empty((len(recs), h, w, 3), dtype=np.float32)
            for i, rec in enumerate(recs):
                arr[i] = read_image(self.root / rec.path)
            self._cache[split] = arr
        return self._cache[split]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _png_bytes(img: np.ndarray) -> bytes:
    import io
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _assign_shapes(cfg: GeneratorConfig, rng) -> list:
    levels = shape_grid_levels(cfg.delta_shape)
    n_params = len(fields(ShapeParams))
    total = cfg.ids_train + cfg.ids_test
    flat = rng.choice(levels ** n_params, size=total, replace=False)
    shapes = []
    for code in flat:
        digits = []
        c = int(code)
        for _ in range(n_params):
            digits.append(c % levels)
            c //= levels
        unit = np.array(digits, dtype=np.float64) / (levels - 1)
        shapes.append(ShapeParams.from_unit(unit))
    return shapes


def generate_dataset(cfg: GeneratorConfig, seed: int, out_dir) -> DatasetManifest:
    """Render the dataset into ``out_dir`` and write ``manifest.json``.

    Train identities wear a single outfit each; every test identity is
    rendered in ``clothing_variants`` distinct outfits and split into
    query/gallery per outfit. Output is a pure function of ``(cfg, seed)``.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    shapes = _assign_shapes(cfg, rng)
    outfits = make_outfits(cfg.palette_hues, cfg.stripe_prob, cfg.luma_jitter, rng)

    plan = []  # (identity, clothing, pose, view, split)
    for pid in range(cfg.ids_train):
        cloth = int(rng.integers(len(outfits)))
        for pose in range(cfg.poses):
            for view in range(cfg.views):
                plan.append((pid, cloth, pose, view, "train"))
    n_pv = cfg.poses * cfg.views
    for k in range(cfg.ids_test):
        pid = cfg.ids_train + k
        cloths = rng.choice(len(outfits), size=cfg.clothing_variants, replace=False)
        for cloth in sorted(int(c) for c in cloths):
            query_slots = set(int(i) for i in rng.choice(n_pv, size=cfg.queries_per_clothing, replace=False))
            for pose in range(cfg.poses):
                for view in range(cfg.views):
                    split = "query" if pose * cfg.views + view in query_slots else "gallery"
                    plan.append((pid, cloth, pose, view, split))

    samples = []
    for idx, (pid, cloth, pose, view, split) in enumerate(plan):
        img_rng = np.random.default_rng([seed, idx])
        img = render_person(shapes[pid], outfits[cloth], pose, cfg.poses, view,
                            cfg.height, cfg.width, img_rng, cfg.noise_amplitude)
        rel = f"images/{split}/{pid}_{cloth}_{pose}_{view}.png"
        data = _png_bytes(img)
        dest = out_dir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(data)
        samples.append(SampleRecord(rel, pid, cloth, pose, view, split, hashlib.sha256(data).hexdigest()))

    counts = {s: sum(1 for r in samples if r.split == s) for s in SPLITS}
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        counts=counts,
        samples=samples,
        seed=int(seed),
        generator=cfg.to_dict(),
        identities={pid: shapes[pid].as_dict() for pid in range(len(shapes))},
        outfits=[o.as_dict() for o in outfits],
        root=out_dir,
    )
    check_invariants(manifest)
    (out_dir / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    log.info("wrote %d images to %s", len(samples), out_dir)
    return manifest


def check_invariants(manifest: DatasetManifest) -> None:
    """Raise if the manifest breaks split or clothing invariants."""
    if manifest.version != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.version!r}")
    train_ids = manifest.identity_set("train")
    test_ids = manifest.identity_set("query") | manifest.identity_set("gallery")
    leaked = train_ids & test_ids
    if leaked:
        raise SplitLeakageError(f"split leakage: identities {sorted(leaked)} appear in train and test")
    clothing = {}
    for s in manifest.samples:
        if s.split not in SPLITS:
            raise DatasetError(f"unknown split {s.split!r} for {s.path}")
        clothing.setdefault((s.split == "train", s.identity_id), set()).add(s.clothing_id)
    for (is_train, pid), cl in clothing.items():
        if is_train and len(cl) != 1:
            raise DatasetError(f"train identity {pid} appears in {len(cl)} outfits; expected exactly one")
        if not is_train and len(cl) < 2:
            raise DatasetError(f"test identity {pid} appears in {len(cl)} outfit; expected at least two")
    counts = {s: sum(1 for r in manifest.samples if r.split == s) for s in SPLITS}
    if counts != {k: int(v) for k, v in manifest.counts.items()}:
        raise DatasetError(f"manifest counts {manifest.counts} disagree with records {counts}")


def load_dataset(path=None, verify_checksums: bool = True) -> DatasetManifest:
    """Load and re-validate a dataset directory.

    ``path`` defaults to ``$CASEFORGE_DATA_DIR``.
    """
    if path is None:
        path = os.environ.get("CASEFORGE_DATA_DIR")
        if not path:
            raise DatasetError("no dataset path given and CASEFORGE_DATA_DIR is unset")
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(mpath)
    manifest = DatasetManifest.from_json(json.loads(mpath.read_text()), root=root)
    check_invariants(manifest)
    h, w = manifest.image_size
    for rec in manifest.samples:
        fpath = root / rec.path
        if not fpath.is_file():
            raise MissingFileError(fpath)
        if verify_checksums and rec.sha256:
            digest = hashlib.sha256(fpath.read_bytes()).hexdigest()
            if digest != rec.sha256:
                raise ChecksumMismatchError(f"checksum mismatch for {fpath}")
        with Image.open(fpath) as im:
            if im.size != (w, h):
                raise ImageShapeError(f"{fpath}: expected {h}x{w}, found {im.size[1]}x{im.size[0]}")
    return manifest


def outfit_of(manifest: DatasetManifest, clothing_id: int) -> Outfit:
    return Outfit.from_dict(manifest.outfits[clothing_id])
