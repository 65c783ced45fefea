"""Dataset manifests, PPM/PGM codec, bilinear resizing, deterministic
splitting, and the synthetic-distortion dataset generator.

Manifest files are plain text. `#`-prefixed lines are comments except the
required directive `#range=<lo>,<hi>` declaring the raw score range. Data
rows are `path,score` with an optional third `,split` field (train/val/test).
Paths are relative to the manifest's directory.

Images are binary PPM (P6, 8-bit), decoded bit-exactly to floats via v/255.
The synthetic generator writes a score manifest plus a sidecar
(`path,level,region` rows) recording where each distortion was applied,
which the attribution tests consume.
"""

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from biqa.errors import (
    CorruptImage,
    MissingRange,
    ParseError,
    ScoreOutOfRange,
    TooFewSamples,
    UnsupportedFormat,
)

QUADRANTS = ("tl", "tr", "bl", "br")
DISTORTIONS = ("blur", "noise", "contrast")
FLOOR_QUALITY = 0.05  # score of the strongest distortion level


@dataclass
class Sample:
    path: str
    score: float
    split: str | None = None


@dataclass
class Manifest:
    samples: list
    score_range: tuple
    base_dir: Path

    def __len__(self):
        return len(self.samples)

    def resolve(self, sample):
        return self.base_dir / sample.path

    def paths(self):
        return [s.path for s in self.samples]

    def scores(self):
        return np.array([s.score for s in self.samples], dtype=np.float64)

    def write(self, path):
        """Write the manifest; paths are rebased so they stay valid relative
        to the file's own directory."""
        path = Path(path)
        lo, hi = self.score_range
        lines = [f"#range={_fmt(lo)},{_fmt(hi)}"]
        for s in self.samples:
            p = s.path
            if self.base_dir is not None and Path(path).parent.resolve() != Path(self.base_dir).resolve():
                p = os.path.relpath(self.resolve(s), path.parent)
            row = f"{p},{_fmt(s.score)}"
            if s.split:
                row += f",{s.split}"
            lines.append(row)
        path.write_text("\n".join(lines) + "\n")


def _fmt(v):
    return repr(float(v))


def load_manifest(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    score_range = None
    samples = []
    seen = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#range="):
                try:
                    lo_s, hi_s = line[len("#range="):].split(",")
                    score_range = (float(lo_s), float(hi_s))
                except ValueError as e:
                    raise ParseError(f"{path}:{lineno}: bad range directive {line!r}") from e
                if score_range[0] >= score_range[1]:
                    raise ParseError(f"{path}:{lineno}: empty range {score_range}")
            continue
        fields = line.split(",")
        if len(fields) not in (2, 3):
            raise ParseError(f"{path}:{lineno}: expected 'path,score[,split]', got {line!r}")
        p = fields[0].strip()
        try:
            score = float(fields[1])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: bad score {fields[1]!r}") from e
        split = fields[2].strip() if len(fields) == 3 else None
        if split is not None and split not in ("train", "val", "test"):
            raise ParseError(f"{path}:{lineno}: bad split tag {split!r}")
        if p in seen:
            raise ParseError(f"{path}:{lineno}: duplicate path {p!r} (first at line {seen[p]})")
        seen[p] = lineno
        samples.append((lineno, Sample(p, score, split)))

    if score_range is None:
        raise MissingRange(f"{path}: missing '#range=lo,hi' directive")
    lo, hi = score_range
    for lineno, s in samples:
        if not lo <= s.score <= hi:
            raise ScoreOutOfRange(f"{path}:{lineno}: score {s.score} outside [{lo}, {hi}]")
    return Manifest([s for _, s in samples], score_range, path.parent)


def normalize_scores(m):
    """Affinely map scores onto [0, 1]; order is preserved exactly."""
    lo, hi = m.score_range
    span = hi - lo
    samples = [dataclasses.replace(s, score=(s.score - lo) / span) for s in m.samples]
    return Manifest(samples, (0.0, 1.0), m.base_dir)


def split(m, ratios=(0.7, 0.1, 0.2), seed=0):
    """Seeded shuffle then contiguous partition into train/val/test manifests."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1: {ratios}")
    n = len(m)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise TooFewSamples(f"{n} samples cannot fill splits at ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    out = []
    for tag, idx in zip(("train", "val", "test"), parts):
        samples = [dataclasses.replace(m.samples[i], split=tag) for i in idx]
        out.append(Manifest(samples, m.score_range, m.base_dir))
    return tuple(out)


def split_by_tag(m):
    """Partition a manifest whose rows all carry explicit split tags."""
    buckets = {"train": [], "val": [], "test": []}
    for s in m.samples:
        if s.split not in buckets:
            raise ParseError(f"sample {s.path!r} has no split tag")
        buckets[s.split].append(s)
    if any(not v for v in buckets.values()):
        raise TooFewSamples("every split needs at least one tagged sample")
    return tuple(Manifest(v, m.score_range, m.base_dir) for v in buckets.values())


# --- PPM / PGM codec ---

def _parse_pnm(blob, path):
    if len(blob) < 2:
        raise CorruptImage(f"{path}: too short to be an image")
    magic = blob[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise CorruptImage(f"{path}: truncated header")
        try:
            fields.append(int(blob[start:pos]))
        except ValueError as e:
            raise CorruptImage(f"{path}: bad header token {blob[start:pos]!r}") from e
    pos += 1  # exactly one whitespace byte separates header and raster
    return magic, fields[0], fields[1], fields[2], pos


def _decode_pnm(path, magic_expected, channels):
    blob = Path(path).read_bytes()
    magic, width, height, maxval, pos = _parse_pnm(blob, path)
    if magic != magic_expected:
        raise UnsupportedFormat(f"{path}: expected {magic_expected.decode()} data, got {magic!r}")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit images supported (maxval {maxval})")
    if width < 1 or height < 1:
        raise CorruptImage(f"{path}: bad dimensions {width}x{height}")
    need = width * height * channels
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise CorruptImage(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float32) / np.float32(255.0)


def decode_image(path):
    """Binary PPM (P6, 8-bit) to float32 (H,W,3) in [0,1], exactly v/255."""
    return _decode_pnm(path, b"P6", 3)


def read_pgm(path):
    """Binary PGM (P5, 8-bit) to float32 (H,W) in [0,1]."""
    return _decode_pnm(path, b"P5", 1)[:, :, 0]


def _quantize(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM writer needs (H,W,3), got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _quantize(img).tobytes())


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM writer needs (H,W), got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _quantize(img).tobytes())


def resize(img, out_h, out_w):
    """Bilinear resampling with half-pixel-center (corner-aligned-off) mapping.

    Resizing to the source dimensions is an exact identity.
    """
    img = np.asarray(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad target size {out_h}x{out_w}")
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype if img.dtype.kind == "f" else np.float64)

    y0, y1, wy = axis_coords(out_h, in_h)
    x0, x1, wx = axis_coords(out_w, in_w)
    wy = wy.reshape(-1, 1, *([1] * (img.ndim - 2)))
    wx = wx.reshape(1, -1, *([1] * (img.ndim - 2)))
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def load_image_for_model(path, input_size):
    img = decode_image(path)
    out = resize(img, input_size[0], input_size[1])
    return out.astype(np.float32, copy=False)


# --- synthetic distortion dataset ---

def _value_noise(rng, size, cells):
    coarse = rng.random((cells, cells, 3))
    return resize(coarse, size, size)


def _base_image(rng, size):
    """Procedural clean image: oriented color gradient, a few flat shapes,
    low-frequency texture, and a touch of fine grain."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy)
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    img = c0 + t[..., None] * (c1 - c0)

    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            r = rng.uniform(0.08, 0.25) * size
            mask = (np.mgrid[0:size, 0:size][0] - cy) ** 2 + (np.mgrid[0:size, 0:size][1] - cx) ** 2 < r * r
        else:
            y0, x0 = (rng.uniform(0.05, 0.6, size=2) * size).astype(int)
            hh, ww = (rng.uniform(0.1, 0.35, size=2) * size).astype(int) + 2
            mask = np.zeros((size, size), dtype=bool)
            mask[y0:y0 + hh, x0:x0 + ww] = True
        img[mask] = 0.35 * img[mask] + 0.65 * color

    img += 0.18 * (_value_noise(rng, size, max(2, size // 8)) - 0.5)
    img += rng.normal(0.0, 0.015, size=img.shape)
    # standardize global brightness/contrast so distortion signatures, not
    # content statistics, dominate the variation across bases
    img = 0.5 + (img - img.mean()) * (0.16 / (img.std() + 1e-6))
    return np.clip(img, 0.0, 1.0)


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with edge-clamped borders."""
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    out = np.asarray(img, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for d in range(2 * radius + 1):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(d, d + out.shape[axis])
            acc += k[d] * padded[tuple(sl)]
        out = acc
    return out


def _distort(img, kind, strength, rng):
    if strength <= 0:
        return img.copy()
    if kind == "blur":
        out = gaussian_blur(img, sigma=3.0 * strength)
    elif kind == "noise":
        out = img + rng.normal(0.0, 0.32 * strength, size=img.shape)
    elif kind == "contrast":
        mean = img.mean(axis=(0, 1), keepdims=True)
        out = mean + (img - mean) * (1.0 - 0.88 * strength)
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def _region_slice(region, size):
    half = size // 2
    return {
        "full": (slice(None), slice(None)),
        "tl": (slice(0, half), slice(0, half)),
        "tr": (slice(0, half), slice(half, size)),
        "bl": (slice(half, size), slice(0, half)),
        "br": (slice(half, size), slice(half, size)),
    }[region]


# Local distortions get a strength boost so a quarter-area defect degrades
# the image comparably to a full-frame one (noise 2x: quarter area at double
# sigma injects the same global variance). Contrast gets the smallest boost
# to keep its scale factor monotone across levels.
# Quadrant mode is drawn only for noise bases: additive noise at 2x sigma on
# a quarter of the frame injects exactly the global variance of full-frame
# sigma, so the level labels stay consistent for globally pooled features.
# Quarter-area blur or contrast loss can shift global statistics by at most
# ~25% of the full-frame effect no matter the strength, which would make
# their labels unlearnable noise for this model family.
_QUADRANT_BOOST = 2.0
_QUADRANT_PROB_NOISE = 0.6


def synth_dataset(out_dir, base_count=100, levels=5, size=64, seed=0):
    """Generate clean base images plus graded distorted variants.

    Returns (manifest, sidecar_rows). Score for level L out of `levels` is
    1 - L/(levels-1) * (1 - 0.05), so each base's scores strictly decrease
    with the distortion level and the worst level keeps a small floor.
    Most bases are distorted over the whole frame; a share of the noise
    bases confine the (strength-boosted) distortion to one random quadrant,
    recorded in the sidecar for the attribution experiments.
    """
    if levels < 2:
        raise ValueError("need at least 2 distortion levels")
    if size < 16:
        raise ValueError("size must be at least 16")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    samples = []
    sidecar = []
    for b in range(base_count):
        clean = _base_image(rng, size)
        kind = DISTORTIONS[int(rng.integers(len(DISTORTIONS)))]
        region = "full"
        if kind == "noise" and rng.random() < _QUADRANT_PROB_NOISE:
            region = QUADRANTS[int(rng.integers(4))]
        boost = 1.0 if region == "full" else _QUADRANT_BOOST
        for level in range(levels):
            strength = level / (levels - 1) * boost
            img = clean
            if level > 0:
                distorted = _distort(clean, kind, strength, rng)
                img = clean.copy()
                sl = _region_slice(region, size)
                img[sl] = distorted[sl]
            rel = f"images/b{b:04d}_l{level}.ppm"
            write_ppm(out_dir / rel, img)
            score = 1.0 - level / (levels - 1) * (1.0 - FLOOR_QUALITY)
            samples.append(Sample(rel, score))
            sidecar.append((rel, level, region))

    manifest = Manifest(samples, (0.0, 1.0), out_dir)
    manifest.write(out_dir / "manifest.txt")
    with open(out_dir / "regions.txt", "w") as f:
        f.write("# path,level,region\n")
        for rel, level, region in sidecar:
            f.write(f"{rel},{level},{region}\n")
    return manifest, sidecar


def load_sidecar(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rel, level, region = line.split(",")
        rows.append((rel, int(level), region))
    return rows
