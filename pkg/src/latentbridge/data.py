"""Procedural skeleton/creature toy domains plus folder ingestion.

Each 32x32 glyph is a rectangular body with a fat head disc on the facing
side, a thin tail on the other, and 1..6 one-pixel spikes on top (the
class). The skeleton domain draws outlines in bone white; the creature
domain fills the body with a class-keyed hue, stripe texture and an eye
dot. Geometry is chosen so two analytic detectors are exact by
construction: the head carries much more mass than bounding-box extent
(foreground centroid lands on the facing side of the box center), and
rows above the body top contain nothing but spikes. The generator
asserts both detectors on every rendered image.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics.tensor import Tensor

__all__ = [
    "DataError",
    "GlyphSpec",
    "ManifestRecord",
    "DatasetManifest",
    "ImageSet",
    "gen_toy_dataset",
    "load_manifest",
    "load_split",
    "orientation_of",
    "spike_count",
    "class_of",
    "foreground_mask",
    "read_png",
    "write_png",
    "CLASS_NAMES",
    "ORIENTATIONS",
    "IMAGE_SIZE",
]

IMAGE_SIZE = 32
N_CLASSES = 6
CLASS_NAMES = tuple(f"{n + 1}-spike" for n in range(N_CLASSES))
ORIENTATIONS = ("left", "right")
DOMAINS = ("skeleton", "creature")

LUMA = np.array([0.299, 0.587, 0.114])
LUMA_THRESHOLD = 0.20
BACKGROUND = 0.05
BONE = (0.93, 0.93, 0.87)
EYE = (0.98, 0.98, 0.98)
CLASS_HUES = (
    (0.96, 0.33, 0.28),
    (0.98, 0.62, 0.18),
    (0.93, 0.91, 0.25),
    (0.30, 0.88, 0.34),
    (0.27, 0.76, 0.95),
    (0.90, 0.39, 0.89),
)
_BODY_ROW_MIN = 9  # spike rows carry at most 6 px; the body top row at least 11


class DataError(ValueError):
    """Dataset generation/ingestion failure."""


@dataclass(frozen=True)
class GlyphSpec:
    """Everything that pins one rendered glyph."""

    class_id: int
    orientation: str
    domain: str
    cx: int = 16
    cy: int = 16
    body_w: int = 12
    body_h: int = 10
    hue_noise: tuple = (0.0, 0.0, 0.0)
    stripe_phase: int = 0

    def __post_init__(self):
        if not (0 <= self.class_id < N_CLASSES):
            raise DataError(f"class_id {self.class_id} outside 0..{N_CLASSES - 1}")
        if self.orientation not in ORIENTATIONS or self.domain not in DOMAINS:
            raise DataError(f"bad orientation/domain {self.orientation}/{self.domain}")


def sample_glyph(rng: np.random.Generator, class_id: int, domain: str) -> GlyphSpec:
    """Draw jitter parameters (position, size, hue noise) for one glyph."""
    return GlyphSpec(
        class_id=class_id,
        orientation=ORIENTATIONS[int(rng.integers(0, 2))],
        domain=domain,
        cx=16 + int(rng.integers(-1, 2)),
        cy=16 + int(rng.integers(-2, 3)),
        body_w=int(rng.choice((10, 12, 14))),
        body_h=int(rng.choice((8, 10))),
        hue_noise=tuple(rng.uniform(-0.04, 0.04, 3)),
        stripe_phase=int(rng.integers(0, 3)),
    )


def render_glyph(spec: GlyphSpec) -> np.ndarray:
    """Render to (32, 32, 3) float32 in [-1, 1]."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    half_w, half_h = spec.body_w // 2, spec.body_h // 2
    sgn = 1 if spec.orientation == "right" else -1
    cx, cy = spec.cx, spec.cy

    body_box = (np.abs(xx - cx) <= half_w) & (np.abs(yy - cy) <= half_h)
    hx = cx + sgn * (half_w + 1)
    head_r2 = (xx - hx) ** 2 + (yy - cy) ** 2
    head_full = head_r2 <= 16
    tail_x0, tail_x1 = cx - sgn * (half_w + 6), cx - sgn * half_w
    tail = (yy == cy) & (xx >= min(tail_x0, tail_x1)) & (xx <= max(tail_x0, tail_x1))
    n = spec.class_id + 1
    spikes = np.zeros_like(body_box)
    top = cy - half_h
    for off in (2 * i - (n - 1) for i in range(n)):
        spikes |= (xx == cx + off) & (yy >= top - 4) & (yy <= top - 1)

    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), BACKGROUND, dtype=np.float64)
    if spec.domain == "skeleton":
        inner = (np.abs(xx - cx) <= half_w - 2) & (np.abs(yy - cy) <= half_h - 2)
        outline = (body_box & ~inner) | (head_full & (head_r2 > 4)) | (head_r2 <= 2)
        img[outline | tail | spikes] = BONE
    else:
        color = np.clip(np.asarray(CLASS_HUES[spec.class_id]) + spec.hue_noise, 0.15, 1.0)
        fg = body_box | head_full | tail | spikes
        img[fg] = color
        stripe = fg & ((yy % 3) == spec.stripe_phase)
        img[stripe] = color * 0.75
        eye = head_r2 <= 2
        img[eye] = EYE
    return (img * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# analytic detectors
# ---------------------------------------------------------------------------


def _as_array(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DataError(f"expected (H,W,3) image, got {arr.shape}")
    return arr


def foreground_mask(image) -> np.ndarray:
    """Boolean mask of pixels whose luma (in [0,1]) clears the threshold."""
    arr = _as_array(image)
    luma = ((arr + 1.0) * 0.5) @ LUMA
    return luma > LUMA_THRESHOLD


def orientation_of(image) -> str:
    """Sign of (foreground centroid - bounding-box center): right if positive."""
    mask = foreground_mask(image)
    if not mask.any():
        raise DataError("no subject")
    xs = np.nonzero(mask)[1]
    centroid = xs.mean()
    box_center = (xs.min() + xs.max()) / 2.0
    return "right" if centroid > box_center else "left"


def spike_count(image) -> int:
    """Count spike runs in the row just above the body top edge."""
    mask = foreground_mask(image)
    if not mask.any():
        raise DataError("no subject")
    rows = mask.sum(axis=1)
    body_rows = np.nonzero(rows >= _BODY_ROW_MIN)[0]
    if body_rows.size == 0 or body_rows[0] < 2:
        raise DataError("no body band")
    probe = mask[body_rows[0] - 2].astype(np.int8)
    return int(np.sum(np.diff(np.concatenate(([0], probe, [0]))) == 1))


def class_of(image) -> int:
    """Class id recovered from the silhouette (spike count minus one)."""
    n = spike_count(image)
    if not (1 <= n <= N_CLASSES):
        raise DataError(f"spike count {n} out of range")
    return n - 1


# ---------------------------------------------------------------------------
# PNG io
# ---------------------------------------------------------------------------


def write_png(path, image: np.ndarray) -> None:
    """image (H,W,3) float in [-1,1] -> 8-bit PNG."""
    u8 = np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """8-bit PNG -> (H,W,3) float32 in [-1,1]."""
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.float32)
    return u8 / 127.5 - 1.0


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    domain: str
    class_id: int
    orientation: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]
    class_names: tuple[str, ...]
    warnings: list[str] = field(default_factory=list)

    def select(self, domain: str | None = None, split: str | None = None):
        return [
            r
            for r in self.records
            if (domain is None or r.domain == domain) and (split is None or r.split == split)
        ]

    def save(self) -> Path:
        path = Path(self.root) / "manifest.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "path": r.path,
                            "domain": r.domain,
                            "class": r.class_id,
                            "orientation": r.orientation,
                            "split": r.split,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        return path

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.jsonl"
        records = []
        names: dict[int, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                rec = ManifestRecord(
                    path=row["path"],
                    domain=row["domain"],
                    class_id=int(row["class"]),
                    orientation=row["orientation"],
                    split=row["split"],
                )
                records.append(rec)
                names.setdefault(rec.class_id, Path(rec.path).parent.name)
        class_names = tuple(names[i] for i in sorted(names))
        return cls(root=root, records=records, class_names=class_names)


def _split_counts(total: int, classes: int = N_CLASSES) -> list[int]:
    base, extra = divmod(total, classes)
    return [base + (1 if c < extra else 0) for c in range(classes)]


def gen_toy_dataset(
    root,
    seed: int = 0,
    train_per_domain: int = 1080,
    test_per_domain: int = 121,
) -> DatasetManifest:
    """Render both domains, verify every image with the detectors, write manifest.

    Domains draw from independent child seeds so no (skeleton, creature)
    pair shares jitter. Classes are balanced within +-1 per split.
    Deterministic given seed, down to PNG bytes.
    """
    if train_per_domain < N_CLASSES or test_per_domain < N_CLASSES:
        raise DataError(
            f"need at least {N_CLASSES} images per domain per split, got "
            f"{train_per_domain}/{test_per_domain}"
        )
    root = Path(root)
    records: list[ManifestRecord] = []
    for d_idx, domain in enumerate(DOMAINS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, d_idx]))
        for split, total in (("train", train_per_domain), ("test", test_per_domain)):
            for class_id, count in enumerate(_split_counts(total)):
                for i in range(count):
                    spec = sample_glyph(rng, class_id, domain)
                    img = render_glyph(spec)
                    assert orientation_of(img) == spec.orientation, spec
                    assert class_of(img) == class_id, spec
                    stem = hashlib.sha256(
                        f"{seed}:{domain}:{class_id}:{split}:{i}".encode()
                    ).hexdigest()[:16]
                    rel = f"{domain}/{CLASS_NAMES[class_id]}/{stem}.png"
                    write_png(root / rel, img)
                    records.append(
                        ManifestRecord(
                            path=rel,
                            domain=domain,
                            class_id=class_id,
                            orientation=spec.orientation,
                            split=split,
                        )
                    )
    manifest = DatasetManifest(root=root, records=records, class_names=CLASS_NAMES)
    manifest.save()
    return manifest


def _stable_split(rel_path: str, test_fraction: float) -> str:
    digest = hashlib.sha256(rel_path.encode("utf-8")).digest()
    frac = int.from_bytes(digest[:8], "big") / 2**64
    return "test" if frac < test_fraction else "train"


def load_manifest(root, test_fraction: float = 0.1) -> DatasetManifest:
    """Load a dataset directory.

    If <root>/manifest.jsonl exists it is authoritative (generated trees
    round-trip exactly). Otherwise the `domain/class/*.png` layout is
    scanned: class ids follow sorted directory names, orientation comes
    from the analytic detector, and the split is a stable hash of the
    relative path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    if (root / "manifest.jsonl").exists():
        return DatasetManifest.read(root)

    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not domains:
        raise DataError(f"{root}: no domain directories")
    class_dirs: set[str] = set()
    for d in domains:
        class_dirs.update(p.name for p in (root / d).iterdir() if p.is_dir())
    class_names = tuple(sorted(class_dirs))
    name_to_id = {n: i for i, n in enumerate(class_names)}

    records: list[ManifestRecord] = []
    warns: list[str] = []
    sizes: dict[tuple[int, int], list[str]] = {}
    for domain in domains:
        for cname in sorted(class_dirs):
            cdir = root / domain / cname
            if not cdir.is_dir():
                continue
            files = sorted(cdir.glob("*.png"))
            if not files:
                warns.append(f"empty class directory {domain}/{cname}")
                continue
            for f in files:
                rel = f"{domain}/{cname}/{f.name}"
                img = read_png(f)
                sizes.setdefault(img.shape[:2], []).append(rel)
                try:
                    orient = orientation_of(img)
                except DataError:
                    warns.append(f"{rel}: no subject, defaulting orientation=left")
                    orient = "left"
                records.append(
                    ManifestRecord(
                        path=rel,
                        domain=domain,
                        class_id=name_to_id[cname],
                        orientation=orient,
                        split=_stable_split(rel, test_fraction),
                    )
                )
    if len(sizes) > 1:
        listing = "; ".join(
            f"{h}x{w}: {paths[0]}" + (f" (+{len(paths) - 1} more)" if len(paths) > 1 else "")
            for (h, w), paths in sorted(sizes.items())
        )
        raise DataError(f"mixed image sizes: {listing}")
    for w in warns:
        warnings.warn(w, stacklevel=2)
    return DatasetManifest(root=root, records=records, class_names=class_names, warnings=warns)


# ---------------------------------------------------------------------------
# image loading
# ---------------------------------------------------------------------------


@dataclass
class ImageSet:
    """Decoded images plus labels for one (domain, split) selection."""

    images: np.ndarray
    labels: np.ndarray
    orientations: np.ndarray  # 0 = left, 1 = right
    ids: list[str]
    class_names: tuple[str, ...]

    def __len__(self) -> int:
        return self.images.shape[0]


def load_split(manifest: DatasetManifest, domain: str, split: str) -> ImageSet:
    recs = manifest.select(domain=domain, split=split)
    if not recs:
        raise DataError(f"no records for domain={domain} split={split}")
    images = np.stack([read_png(Path(manifest.root) / r.path) for r in recs])
    return ImageSet(
        images=images,
        labels=np.array([r.class_id for r in recs], dtype=np.int64),
        orientations=np.array(
            [ORIENTATIONS.index(r.orientation) for r in recs], dtype=np.int64
        ),
        ids=[Path(r.path).stem for r in recs],
        class_names=manifest.class_names,
    )
