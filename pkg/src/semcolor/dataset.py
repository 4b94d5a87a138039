"""Image ingestion, resizing and the seeded train/test split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from semcolor.colorspace import ChromaMap, RgbImage, rgb_to_lab, split_l_ab
from semcolor.errors import SampleLoadError

DEFAULT_SIZE = (300, 300)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}
ROLES = ("train", "test")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[tuple[str, str], ...]
    size: tuple[int, int] = DEFAULT_SIZE  # (width, height)
    ratio: float = 0.9
    seed: int = 0

    def __post_init__(self):
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest lists the same path more than once")
        bad = {r for _, r in self.entries} - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        if not 0 < self.ratio < 1:
            raise ValueError(f"split ratio must lie in (0, 1), got {self.ratio}")

    def paths(self, role: str) -> list[str]:
        return [p for p, r in self.entries if r == role]


@dataclass(frozen=True, eq=False)
class Sample:
    l: np.ndarray
    ab: ChromaMap
    source_id: str = field(default="")


def load_image(path) -> RgbImage:
    """Decode an 8-bit image at native size; single-channel input is replicated."""
    with Image.open(path) as im:
        im.load()
        return RgbImage(np.asarray(_as_rgb(im)))


def _as_rgb(im: Image.Image) -> Image.Image:
    if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
        raise ValueError(f"expected an 8-bit image, got mode {im.mode}")
    return im if im.mode == "RGB" else im.convert("RGB")


def load_and_resize(path, target: tuple[int, int] = DEFAULT_SIZE) -> RgbImage:
    """Load ``path`` and resample it bilinearly to ``target`` = (width, height)."""
    width, height = target
    if width < 1 or height < 1:
        raise ValueError(f"resize target must be positive, got {target}")
    with Image.open(path) as im:
        im.load()
        rgb = _as_rgb(im)
        if rgb.size != (width, height):
            rgb = rgb.resize((width, height), Image.Resampling.BILINEAR)
        return RgbImage(np.asarray(rgb))


def list_images(directory) -> list[str]:
    directory = Path(directory)
    return sorted(
        str(p) for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def train_count(n: int, ratio: float) -> int:
    # Half-up rounding; Python's round() is banker's.
    return int(math.floor(ratio * n + 0.5))


def make_split(
    paths: Sequence[str], ratio: float = 0.9, seed: int = 0, size: tuple[int, int] = DEFAULT_SIZE
) -> DatasetManifest:
    paths = [str(p) for p in paths]
    if not paths:
        raise ValueError("cannot split an empty list of paths")
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(set(paths)) != len(paths):
        raise ValueError("duplicate paths in input")
    order = np.random.default_rng(seed).permutation(len(paths))
    n_train = train_count(len(paths), ratio)
    train = set(order[:n_train].tolist())
    entries = tuple((p, "train" if i in train else "test") for i, p in enumerate(paths))
    return DatasetManifest(entries, size=tuple(size), ratio=ratio, seed=seed)


def save_manifest(manifest: DatasetManifest, path) -> None:
    width, height = manifest.size
    lines = [
        f"# size={width}x{height}",
        f"# ratio={manifest.ratio!r}",
        f"# seed={manifest.seed}",
    ]
    lines += [f"{p}\t{r}" for p, r in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    meta = {}
    entries = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        if raw.startswith("#"):
            key, _, value = raw[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        parts = raw.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'path<TAB>role'")
        entries.append((parts[0], parts[1]))
    size = DEFAULT_SIZE
    if "size" in meta:
        w, h = meta["size"].split("x")
        size = (int(w), int(h))
    return DatasetManifest(
        tuple(entries),
        size=size,
        ratio=float(meta.get("ratio", 0.9)),
        seed=int(meta.get("seed", 0)),
    )


def image_to_sample(img: RgbImage, source_id: str = "") -> Sample:
    l, ab = split_l_ab(rgb_to_lab(img))
    return Sample(l, ab, source_id)


def to_samples(manifest: DatasetManifest, role: str = "train") -> Iterator[Sample]:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    for path in manifest.paths(role):
        try:
            img = load_and_resize(path, manifest.size)
        except (OSError, ValueError) as exc:
            raise SampleLoadError(path, exc) from exc
        yield image_to_sample(img, path)
