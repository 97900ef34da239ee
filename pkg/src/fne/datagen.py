"""Synthetic two-view paired data with known false negatives, and the FNED
binary container for paired embeddings.

Each generating cluster has a unit-norm latent center. An item is either a
*duplicate* (probability ``duplicate_rate``), whose latent sits on the
center up to a tiny jitter, or a *distinct* item spread further around the
center. Duplicates of one cluster are semantically interchangeable, so they
share a cluster label; every distinct item gets a label of its own. A
candidate negative that shares the anchor's label is therefore a ground-truth
false negative.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from fne.errors import FormatError

MAGIC = b"FNED"
VERSION = 1
_CLUSTER_MARKER = b"C"


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int = 8
    items_per_cluster: int = 32
    captions_per_image: int = 2
    latent_dim: int = 8
    image_dim: int = 32
    text_dim: int = 32
    noise_sigma: float = 0.05
    duplicate_rate: float = 0.2
    item_spread: float = 0.5
    duplicate_jitter: float = 0.02
    min_center_angle: float = 60.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clusters", "items_per_cluster", "captions_per_image",
                     "latent_dim", "image_dim", "text_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.image_dim, self.text_dim) < self.latent_dim:
            raise ValueError("view dimensions must be at least latent_dim")
        if self.noise_sigma < 0 or self.item_spread < 0 or self.duplicate_jitter < 0:
            raise ValueError("noise and spread parameters must be nonnegative")
        if not 0.0 <= self.duplicate_rate <= 1.0:
            raise ValueError("duplicate_rate must lie in [0, 1]")
        if not 0.0 <= self.min_center_angle < 180.0:
            raise ValueError("min_center_angle must lie in [0, 180)")

    @property
    def n_items(self) -> int:
        return self.n_clusters * self.items_per_cluster

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PairedDataset:
    image_view: np.ndarray
    text_view: np.ndarray
    pair_of: np.ndarray
    cluster_of: np.ndarray | None = None

    @property
    def has_clusters(self) -> bool:
        return self.cluster_of is not None

    @property
    def n_images(self) -> int:
        return self.image_view.shape[0]

    @property
    def n_texts(self) -> int:
        return self.text_view.shape[0]

    def captions_of(self) -> list[np.ndarray]:
        order = np.argsort(self.pair_of, kind="stable")
        bounds = np.searchsorted(self.pair_of[order], np.arange(self.n_images + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.n_images)]

    def validate(self) -> None:
        if self.pair_of.shape != (self.n_texts,):
            raise FormatError("inconsistent", "pair mapping length differs from text count")
        if self.n_texts and (self.pair_of.min() < 0 or self.pair_of.max() >= self.n_images):
            raise FormatError("inconsistent", "pair mapping points outside the image set")
        if self.cluster_of is not None and self.cluster_of.shape != (self.n_images,):
            raise FormatError("inconsistent", "cluster labels do not match image count")

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairedDataset):
            return NotImplemented
        same_clusters = (self.cluster_of is None) == (other.cluster_of is None) and (
            self.cluster_of is None or np.array_equal(self.cluster_of, other.cluster_of)
        )
        return (
            same_clusters
            and np.array_equal(self.image_view, other.image_view)
            and np.array_equal(self.text_view, other.text_view)
            and np.array_equal(self.pair_of, other.pair_of)
        )


def _cluster_centers(spec: SyntheticSpec, rng: np.random.Generator,
                     max_attempts: int = 10_000) -> np.ndarray:
    max_cos = np.cos(np.deg2rad(spec.min_center_angle))
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < spec.n_clusters:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"cannot place {spec.n_clusters} centers in {spec.latent_dim} dims "
                f"{spec.min_center_angle} degrees apart"
            )
        c = rng.standard_normal(spec.latent_dim)
        c /= np.linalg.norm(c)
        if all(np.dot(c, o) <= max_cos for o in centers):
            centers.append(c)
    return np.array(centers)


SPLITS = ("train", "test")


def _draw(spec: SyntheticSpec, split: str = "train"):
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    root = np.random.SeedSequence(spec.seed)
    center_rng, item_rng, map_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(4))
    if split != "train":
        # same centers and view maps, fresh items and noise
        item_rng, noise_rng = (
            np.random.default_rng(s)
            for s in np.random.SeedSequence([spec.seed, SPLITS.index(split)]).spawn(2)
        )
    centers = _cluster_centers(spec, center_rng)
    L = spec.latent_dim
    gen_cluster = np.repeat(np.arange(spec.n_clusters), spec.items_per_cluster)
    is_dup = item_rng.random(spec.n_items) < spec.duplicate_rate
    scale = np.where(is_dup, spec.duplicate_jitter, spec.item_spread) / np.sqrt(L)
    latent = centers[gen_cluster] + scale[:, None] * item_rng.standard_normal((spec.n_items, L))
    A = map_rng.standard_normal((spec.image_dim, L)) / np.sqrt(L)
    B = map_rng.standard_normal((spec.text_dim, L)) / np.sqrt(L)
    return latent, is_dup, gen_cluster, A, B, noise_rng


def generate(spec: SyntheticSpec, split: str = "train") -> PairedDataset:
    """Draw a paired dataset; a pure function of ``spec`` (seed included).

    ``split="test"`` draws fresh items around the same cluster centers
    through the same view maps, for held-out evaluation.
    """
    latent, is_dup, gen_cluster, A, B, noise_rng = _draw(spec, split)
    image = latent @ A.T + spec.noise_sigma * noise_rng.standard_normal((spec.n_items, spec.image_dim))
    pair_of = np.repeat(np.arange(spec.n_items), spec.captions_per_image)
    text = latent[pair_of] @ B.T + spec.noise_sigma * noise_rng.standard_normal(
        (pair_of.size, spec.text_dim)
    )
    cluster_of = np.where(is_dup, gen_cluster, spec.n_clusters + np.arange(spec.n_items))
    return PairedDataset(
        image.astype(np.float32), text.astype(np.float32), pair_of.astype(np.int64),
        cluster_of.astype(np.int64),
    )


def generation_maps(spec: SyntheticSpec, split: str = "train"):
    """Latents and the two view maps ``generate`` used, for diagnostics."""
    latent, _, _, A, B, _ = _draw(spec, split)
    return latent, A, B


def save_embeddings(ds: PairedDataset, path) -> None:
    ds.validate()
    img = np.ascontiguousarray(ds.image_view, dtype="<f4")
    txt = np.ascontiguousarray(ds.text_view, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, img.shape[1], txt.shape[1]))
        fh.write(struct.pack("<QQ", img.shape[0], txt.shape[0]))
        fh.write(np.ascontiguousarray(ds.pair_of, dtype="<u8").tobytes())
        fh.write(img.tobytes())
        fh.write(txt.tobytes())
        if ds.cluster_of is not None:
            fh.write(_CLUSTER_MARKER)
            fh.write(struct.pack("<Q", ds.cluster_of.size))
            fh.write(np.ascontiguousarray(ds.cluster_of, dtype="<i8").tobytes())


class ByteReader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated", f"truncated payload while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count, what), dtype=dtype, count=count)

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def load_embeddings(path) -> PairedDataset:
    r = ByteReader(Path(path).read_bytes())
    if r.remaining < 4 or r.take(4, "magic") != MAGIC:
        raise FormatError("bad_magic", f"{path} is not an FNED file")
    version, img_dim, txt_dim = struct.unpack("<III", r.take(12, "header"))
    if version != VERSION:
        raise FormatError("bad_version", f"unsupported FNED version {version}")
    n_img, n_txt = struct.unpack("<QQ", r.take(16, "counts"))
    if n_img and img_dim == 0 or n_txt and txt_dim == 0:
        raise FormatError("inconsistent", "zero dimension with nonzero count")
    pair_of = r.array("<u8", n_txt, "pair mapping").astype(np.int64)
    image = r.array("<f4", n_img * img_dim, "image matrix").reshape(n_img, img_dim)
    text = r.array("<f4", n_txt * txt_dim, "text matrix").reshape(n_txt, txt_dim)
    cluster_of = None
    if r.remaining:
        if r.take(1, "section marker") != _CLUSTER_MARKER:
            raise FormatError("inconsistent", "unknown trailing section")
        (n_lab,) = struct.unpack("<Q", r.take(8, "cluster count"))
        if n_lab != n_img:
            raise FormatError("inconsistent", f"{n_lab} cluster labels for {n_img} images")
        cluster_of = r.array("<i8", n_lab, "cluster labels").astype(np.int64)
        if r.remaining:
            raise FormatError("inconsistent", f"{r.remaining} unexpected trailing bytes")
    ds = PairedDataset(image.copy(), text.copy(), pair_of, cluster_of)
    ds.validate()
    return ds
