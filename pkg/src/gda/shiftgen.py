"""Procedural source domain (four 16x16 shape classes) and its distribution shifts.

Corruption families play the role of a small ImageNet-C; style families
(sketch, inversion, texture overlay) stand in for the natural/stylized OOD sets.
Severity tables are fixed constants; see ``SEVERITY_TABLES``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from gda import container
from gda.schedule import derive_seed

CLASS_NAMES = ("disk", "square", "cross", "stripes")
CORRUPTIONS = ("gaussian_noise", "shot_noise_analog", "box_blur", "motion_blur_analog",
               "contrast", "brightness", "pixelate", "elastic_analog")
STYLES = ("edge_sketch", "inversion_style", "texture_overlay")

# Per-family parameter for severities 1..5. Calibrated once against the
# reference classifier (severity 3 targets a 10-40 point accuracy drop).
SEVERITY_TABLES: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.06, 0.09, 0.14, 0.21, 0.29),     # noise std
    "shot_noise_analog": (150.0, 45.0, 18.0, 9.0, 5.0),   # photon count at full intensity
    "box_blur": (1.7, 2.3, 3.2, 3.7, 4.2),                # kernel width, px (fractional edges)
    "motion_blur_analog": (2.0, 2.9, 3.8, 4.8, 5.7),      # streak length, px
    "contrast": (0.97, 0.95, 0.9, 0.88, 0.84),            # contrast multiplier
    "brightness": (1.01, 1.02, 1.04, 1.07, 1.11),         # brightness scale
    "pixelate": (1.14, 1.34, 1.78, 2.29, 2.67),           # downsampling factor
    "elastic_analog": (2.0, 2.8, 4.0, 5.7, 7.5),          # peak displacement, px
    "edge_sketch": (0.014, 0.023, 0.035, 0.054, 0.07),    # blend toward sketch
    "inversion_style": (0.012, 0.017, 0.028, 0.043, 0.059),  # blend toward negative
    "texture_overlay": (0.07, 0.11, 0.17, 0.26, 0.35),    # pattern amplitude
}

PROTOTYPE_MARGIN = 4.0
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SourceSpec:
    class_count: int = 4
    image_size: int = 16
    jitter_px: float = 3.0
    scale_range: tuple[float, float] = (0.7, 1.3)
    noise_amplitude: float = 0.05
    samples_per_class: dict = field(default_factory=lambda: {"train": 500, "test": 200})

    def __post_init__(self):
        if self.class_count != len(CLASS_NAMES):
            raise ValueError(f"class_count must be {len(CLASS_NAMES)}")
        if self.image_size < 8:
            raise ValueError("image_size too small")


@dataclass(frozen=True)
class ShiftSpec:
    family: str
    severity: int

    def __post_init__(self):
        if self.family not in SEVERITY_TABLES:
            raise ValueError(f"unknown shift family {self.family!r}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self) -> float:
        return SEVERITY_TABLES[self.family][int(self.severity) - 1]

    @property
    def name(self) -> str:
        return f"{self.family}-s{self.severity}"


@dataclass
class Dataset:
    images: np.ndarray    # (N, 1, H, W) float32 in [-1, 1]
    labels: np.ndarray    # (N,) int64
    ids: list[str]
    geometry: np.ndarray  # (N, 3): centre x, centre y, scale

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.ids[:n], self.geometry[:n])


def _coverage(label: int, cx: float, cy: float, scale: float, size: int) -> np.ndarray:
    """Anti-aliased occupancy in [0, 1] of one shape on a ``size`` x ``size`` grid."""
    ss = _SUPERSAMPLE
    coords = (np.arange(size * ss) + 0.5) / ss - 0.5
    dx = coords[None, :] - cx
    dy = coords[:, None] - cy
    s = scale
    name = CLASS_NAMES[label]
    if name == "disk":
        mask = dx ** 2 + dy ** 2 <= (3.4 * s) ** 2
    elif name == "square":
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= 3.8 * s
    elif name == "cross":
        arm, half = 4.6 * s, 1.2 * s
        mask = ((np.abs(dx) <= half) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= half) & (np.abs(dx) <= arm))
    else:
        half = 4.4 * s
        band = np.floor((dy + half) / (2 * half / 5))
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half) & (band % 2 == 0)
    return mask.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render(label: int, cx: float, cy: float, scale: float, size: int = 16) -> np.ndarray:
    return (2.0 * _coverage(label, cx, cy, scale, size) - 1.0).astype(np.float32)


def class_prototypes(size: int = 16) -> np.ndarray:
    centre = (size - 1) / 2
    return np.stack([render(k, centre, centre, 1.0, size) for k in range(len(CLASS_NAMES))])


def check_prototype_margin(size: int = 16, margin: float = PROTOTYPE_MARGIN) -> float:
    protos = class_prototypes(size).reshape(len(CLASS_NAMES), -1)
    dists = np.linalg.norm(protos[:, None] - protos[None, :], axis=-1)
    closest = dists[~np.eye(len(protos), dtype=bool)].min()
    if closest <= margin:
        raise AssertionError(f"class prototypes too close: {closest:.3f} <= {margin}")
    return float(closest)


def generate_source(spec: SourceSpec, split: str, seed: int) -> Dataset:
    """Balanced, deterministic dataset; classes interleave 0,1,2,3,0,1,..."""
    if split not in spec.samples_per_class:
        raise ValueError(f"unknown split {split!r}")
    check_prototype_margin(spec.image_size)
    n_per = int(spec.samples_per_class[split])
    k = spec.class_count
    rng = np.random.default_rng(derive_seed(seed, "source", split))
    size = spec.image_size
    centre = (size - 1) / 2
    n = n_per * k
    labels = np.tile(np.arange(k), n_per).astype(np.int64)
    offsets = rng.uniform(-spec.jitter_px, spec.jitter_px, size=(n, 2))
    scales = rng.uniform(*spec.scale_range, size=n)
    amps = rng.uniform(0.0, spec.noise_amplitude, size=n)
    texture = rng.uniform(-1.0, 1.0, size=(n, size, size))
    images = np.empty((n, 1, size, size), dtype=np.float32)
    geometry = np.empty((n, 3), dtype=np.float64)
    for i in range(n):
        cx, cy = centre + offsets[i, 0], centre + offsets[i, 1]
        img = render(int(labels[i]), cx, cy, scales[i], size) + amps[i] * texture[i]
        images[i, 0] = np.clip(img, -1.0, 1.0)
        geometry[i] = (cx, cy, scales[i])
    ids = [f"src-{split}-{i:05d}" for i in range(n)]
    return Dataset(images, labels, ids, geometry)


# -- shifts ------------------------------------------------------------------

def _to_unit(x):
    return (x + 1.0) / 2.0


def _from_unit(u):
    return 2.0 * u - 1.0


def _line_kernel(length: float, angle: float) -> np.ndarray:
    radius = int(np.ceil(length / 2))
    k = np.zeros((2 * radius + 1, 2 * radius + 1))
    for s in np.linspace(-length / 2, length / 2, int(4 * length) + 1):
        px, py = radius + s * np.cos(angle), radius + s * np.sin(angle)
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        fx, fy = px - x0, py - y0
        for ddx, wx in ((0, 1 - fx), (1, fx)):
            for ddy, wy in ((0, 1 - fy), (1, fy)):
                if 0 <= y0 + ddy < k.shape[0] and 0 <= x0 + ddx < k.shape[1]:
                    k[y0 + ddy, x0 + ddx] += wx * wy
    return k / k.sum()


def _box_kernel(width: float) -> np.ndarray:
    """1-D box of (possibly fractional) ``width``: tap i gets its overlap with [-width/2, width/2]."""
    radius = int(np.ceil((width - 1) / 2))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.clip(np.minimum(taps + 0.5, width / 2) - np.maximum(taps - 0.5, -width / 2), 0.0, None)
    return k / k.sum()


def _resize(img: np.ndarray, size: int, resample) -> np.ndarray:
    return np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), resample))


def _sobel_magnitude(img: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def apply_shift(x: np.ndarray, shift: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    """Shift a single (C, H, W) sample; output is clamped to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    p = shift.parameter
    fam = shift.family
    h, w = x.shape[-2:]
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        img = x[c]
        if fam == "gaussian_noise":
            y = img + p * rng.standard_normal(img.shape)
        elif fam == "shot_noise_analog":
            y = _from_unit(rng.poisson(np.clip(_to_unit(img), 0, 1) * p) / p)
        elif fam == "box_blur":
            k = _box_kernel(p)
            y = ndimage.correlate1d(ndimage.correlate1d(img, k, axis=0, mode="nearest"), k, axis=1, mode="nearest")
        elif fam == "motion_blur_analog":
            angle = rng.uniform(0, np.pi)
            y = ndimage.convolve(img, _line_kernel(p, angle), mode="nearest")
        elif fam == "contrast":
            m = img.mean()
            y = m + p * (img - m)
        elif fam == "brightness":
            y = _from_unit(1.0 - (1.0 - _to_unit(img)) / p)
        elif fam == "pixelate":
            small = max(1, int(round(h / p)))
            y = img if small == h else _resize(_resize(img, small, Image.BOX), h, Image.NEAREST)
        elif fam == "elastic_analog":
            field = ndimage.gaussian_filter(rng.standard_normal((2, h, w)), sigma=(0, 2.0, 2.0))
            field *= p / max(np.abs(field).max(), 1e-12)
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            y = ndimage.map_coordinates(img, [yy + field[0], xx + field[1]], order=1, mode="nearest")
        elif fam == "edge_sketch":
            edges = np.clip(_sobel_magnitude(img) / 4.0, 0.0, 1.0)
            sketch = 1.0 - 2.0 * edges
            y = (1 - p) * img + p * sketch
        elif fam == "inversion_style":
            y = (1 - 2 * p) * img
        elif fam == "texture_overlay":
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(2.5, 3.5)
            phase = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:h, 0:w]
            y = img + p * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        else:  # pragma: no cover - ShiftSpec validates family
            raise ValueError(fam)
        out[c] = y
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def shift_dataset(data: Dataset, shift: ShiftSpec, seed: int) -> np.ndarray:
    out = np.empty_like(data.images)
    for i, sid in enumerate(data.ids):
        rng = np.random.default_rng(derive_seed(seed, "shift", shift.family, shift.severity, sid))
        out[i] = apply_shift(data.images[i], shift, rng)
    return out


def nearest_prototype_rate(images: np.ndarray, data: Dataset, shift: ShiftSpec | None = None,
                           seed: int = 0) -> float:
    """Fraction of shifted samples whose nearest (L2) candidate is their own class.

    Candidates are the noiseless renders of every class at the sample's own
    position and scale, passed through the same shift with the same random
    draw as the sample, so the score measures whether the shift merges classes.
    """
    hits = 0
    size = data.images.shape[-1]
    for i in range(len(data)):
        cx, cy, s = data.geometry[i]
        cands = np.stack([render(k, cx, cy, s, size) for k in range(len(CLASS_NAMES))])[:, None]
        if shift is not None:
            key = derive_seed(seed, "shift", shift.family, shift.severity, data.ids[i])
            cands = np.stack([apply_shift(c, shift, np.random.default_rng(key)) for c in cands])
        d = ((cands - images[i][None]) ** 2).reshape(len(cands), -1).sum(axis=1)
        hits += int(np.argmin(d) == data.labels[i])
    return hits / max(len(data), 1)


# -- benchmark manifest ------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    label: int
    family: str
    severity: int
    offset: int
    clean_id: str

    def to_line(self) -> str:
        return (f"id={self.sample_id} label={self.label} family={self.family} "
                f"severity={self.severity} clean_id={self.clean_id} offset={self.offset}")

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(kv["id"], int(kv["label"]), kv["family"], int(kv["severity"]),
                   int(kv["offset"]), kv["clean_id"])


MANIFEST_HEADER = "# gda-manifest v1"


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    container_name: str = "benchmark.gdac"

    def shifted(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.family != "clean"]

    def clean(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.family == "clean"]

    def __len__(self):
        return len(self.shifted())

    def to_text(self) -> str:
        lines = [MANIFEST_HEADER, f"# container={self.container_name}"]
        lines += [e.to_line() for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Manifest":
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise ValueError("not a gda manifest")
        name = "benchmark.gdac"
        entries = []
        for line in lines[1:]:
            if line.startswith("# container="):
                name = line.split("=", 1)[1]
            elif line.strip() and not line.startswith("#"):
                entries.append(ManifestEntry.from_line(line))
        return cls(entries, name)


@dataclass
class Benchmark:
    manifest: Manifest
    images: dict[str, np.ndarray]

    def arrays(self, entries: list[ManifestEntry]) -> tuple[np.ndarray, np.ndarray, list[str]]:
        xs = np.stack([self.images[e.sample_id] for e in entries])
        ys = np.array([e.label for e in entries], dtype=np.int64)
        return xs, ys, [e.sample_id for e in entries]

    def groups(self) -> dict[tuple[str, int], list[ManifestEntry]]:
        out: dict[tuple[str, int], list[ManifestEntry]] = {}
        for e in self.manifest.shifted():
            out.setdefault((e.family, e.severity), []).append(e)
        return out


def build_benchmark(test_set: Dataset, shifts: list[ShiftSpec], n_per_shift: int, seed: int) -> Benchmark:
    if not shifts:
        raise ValueError("shift list must be nonempty")
    if n_per_shift > len(test_set):
        raise ValueError(f"n_per_shift={n_per_shift} exceeds test set size {len(test_set)}")
    clean = test_set.subset(n_per_shift)
    images: dict[str, np.ndarray] = {}
    pending: list[tuple[str, int, str, int, str]] = []
    for i in range(n_per_shift):
        cid = f"clean-{i:04d}"
        images[cid] = clean.images[i]
        pending.append((cid, int(clean.labels[i]), "clean", 0, cid))
    for shift in shifts:
        shifted = shift_dataset(clean, shift, seed)
        for i in range(n_per_shift):
            sid = f"{shift.family}-s{shift.severity}-{i:04d}"
            images[sid] = shifted[i]
            pending.append((sid, int(clean.labels[i]), shift.family, shift.severity, f"clean-{i:04d}"))
    _, offsets = container.encode(images)
    entries = [ManifestEntry(sid, lab, fam, sev, offsets[sid], cid) for sid, lab, fam, sev, cid in pending]
    return Benchmark(Manifest(entries), images)


def save_benchmark(bench: Benchmark, directory: str | Path) -> Path:
    directory = Path(directory)
    offsets = container.save(directory / bench.manifest.container_name, bench.images)
    for e in bench.manifest.entries:
        assert offsets[e.sample_id] == e.offset
    path = directory / "benchmark.manifest"
    path.write_text(bench.manifest.to_text())
    return path


def load_benchmark(manifest_path: str | Path) -> Benchmark:
    manifest_path = Path(manifest_path)
    manifest = Manifest.from_text(manifest_path.read_text())
    images = container.load(manifest_path.parent / manifest.container_name)
    missing = [e.sample_id for e in manifest.entries if e.sample_id not in images]
    if missing:
        raise ValueError(f"container lacks {len(missing)} manifest entries, e.g. {missing[0]}")
    return Benchmark(manifest, dict(images))


def save_dataset(data: Dataset, path: str | Path) -> None:
    records = {"images": data.images, "labels": data.labels.astype(np.float32), "geometry": data.geometry}
    container.save(path, records)


def load_dataset(path: str | Path, prefix: str = "src") -> Dataset:
    rec = container.load(path)
    n = len(rec["labels"])
    split = Path(path).stem.split("_")[-1]
    return Dataset(rec["images"], rec["labels"].astype(np.int64),
                   [f"{prefix}-{split}-{i:05d}" for i in range(n)], rec["geometry"].astype(np.float64))


def write_audit_sheet(path: str | Path, images: np.ndarray, columns: int = 10, zoom: int = 3) -> None:
    """Binary PGM contact sheet of ``images`` (N, 1, H, W) for eyeballing label preservation."""
    n, _, h, w = images.shape
    rows = -(-n // columns)
    sheet = np.full((rows * (h + 1) + 1, columns * (w + 1) + 1), 128, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        tile = np.clip(np.round((images[i, 0] + 1) * 127.5), 0, 255).astype(np.uint8)
        sheet[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = tile
    sheet = np.kron(sheet, np.ones((zoom, zoom), dtype=np.uint8))
    buf = io.BytesIO()
    buf.write(f"P5\n{sheet.shape[1]} {sheet.shape[0]}\n255\n".encode("ascii"))
    buf.write(sheet.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())
