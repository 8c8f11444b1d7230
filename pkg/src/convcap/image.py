"""Raster I/O, augmentation transforms, a deterministic toy image encoder,
and the binary feature-file format.

Images are 8-bit RGB arrays of shape (height, width, 3). All transforms
return new rasters; nothing mutates its input. The toy encoder stands in
for a pre-trained CNN: it summarizes each grid cell with simple statistics
and projects them through a fixed seed-derived matrix, giving per-region
vectors plus a pooled global vector that real encoder features can replace
via the ICF1 file format.
"""

import struct
from dataclasses import dataclass

import numpy as np

from convcap.errors import FormatError

POLICIES = ("none", "horizontal", "vertical", "flip", "rotate", "perspective")

FEATURE_MAGIC = b"ICF1"


@dataclass
class ImageRaster:
    pixels: np.ndarray  # uint8, (h, w, 3)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError("ImageRaster expects uint8 pixels of shape (h, w, 3)")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)

def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("ppm: truncated header")
    return data[start:pos], pos


def read_ppm(data: bytes) -> ImageRaster:
    magic, pos = _read_header_token(data, 0)
    if magic != b"P6":
        raise FormatError(f"ppm: unsupported format {magic!r}, only binary P6 is supported")
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError as e:
            raise FormatError(f"ppm: bad header field {tok!r}") from e
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError("ppm: non-positive dimensions")
    if maxval != 255:
        raise FormatError(f"ppm: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos:pos + 3 * width * height]
    if len(payload) < 3 * width * height:
        raise FormatError("ppm: truncated pixel payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageRaster(pixels.copy())


def write_ppm(img: ImageRaster) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def load_ppm(path) -> ImageRaster:
    with open(path, "rb") as fh:
        return read_ppm(fh.read())


def save_ppm(path, img: ImageRaster):
    with open(path, "wb") as fh:
        fh.write(write_ppm(img))


# ---------------------------------------------------------------------------
# Exact pixel permutations

def flip_h(img: ImageRaster) -> ImageRaster:
    """Mirror about the vertical axis (left-right)."""
    return ImageRaster(np.ascontiguousarray(img.pixels[:, ::-1]))


def flip_v(img: ImageRaster) -> ImageRaster:
    """Mirror about the horizontal axis (top-bottom)."""
    return ImageRaster(np.ascontiguousarray(img.pixels[::-1]))


def rotate90k(img: ImageRaster, k: int) -> ImageRaster:
    """Rotate by k * 90 degrees counterclockwise; k in {1, 2, 3}."""
    if k not in (1, 2, 3):
        raise ValueError("rotate90k: k must be 1, 2 or 3")
    return ImageRaster(np.ascontiguousarray(np.rot90(img.pixels, k)))


# ---------------------------------------------------------------------------
# Homographies

def perspective_from_points(src, dst) -> np.ndarray:
    """Solve the 3x3 homography H with H @ [x, y, 1] ~ dst for 4 point pairs.

    Standard 8x8 linear system; H is normalized so H[2, 2] == 1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("perspective_from_points expects 4 source and 4 destination points")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"degenerate point correspondences: {e}") from e
    return np.append(h, 1.0).reshape(3, 3)


def warp_perspective(img: ImageRaster, h: np.ndarray) -> ImageRaster:
    """Inverse-mapped bilinear warp; out-of-bounds samples fill black."""
    try:
        hinv = np.linalg.inv(np.asarray(h, dtype=np.float64))
    except np.linalg.LinAlgError as e:
        raise ValueError("warp_perspective: homography is not invertible") from e

    hh, ww = img.height, img.width
    ys, xs = np.mgrid[0:hh, 0:ww]
    ones = np.ones_like(xs, dtype=np.float64)
    coords = np.stack([xs, ys, ones], axis=0).reshape(3, -1)
    mapped = hinv @ coords
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = mapped[0] / mapped[2]
        sy = mapped[1] / mapped[2]
    sx = np.where(np.isfinite(sx), sx, -1.0)
    sy = np.where(np.isfinite(sy), sy, -1.0)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    pix = img.pixels.astype(np.float64)
    out = np.zeros((hh * ww, 3))
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            px = x0 + dx
            py = y0 + dy
            valid = np.where((px >= 0) & (px < ww) & (py >= 0) & (py < hh))[0]
            out[valid] += wgt[valid][:, None] * pix[py[valid], px[valid]]
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8).reshape(hh, ww, 3)
    return ImageRaster(pixels)


# ---------------------------------------------------------------------------
# Augmentation policies

@dataclass
class AugmentPolicy:
    kind: str
    distortion_scale: float = 0.5

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown augmentation policy {self.kind!r}")
        if not 0.0 <= self.distortion_scale <= 1.0:
            raise ValueError("distortion_scale must be in [0, 1]")


def _random_perspective(img: ImageRaster, scale: float, rng) -> ImageRaster:
    w, h = img.width, img.height
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    dx = rng.uniform(-scale * w / 2, scale * w / 2, size=4)
    dy = rng.uniform(-scale * h / 2, scale * h / 2, size=4)
    moved = corners + np.stack([dx, dy], axis=1)
    hmat = perspective_from_points(corners, moved)
    return warp_perspective(img, hmat)


def apply_policy(img: ImageRaster, policy: AugmentPolicy, rng: np.random.Generator) -> ImageRaster:
    """Draw one augmented view of the image.

    Outcome distributions: horizontal/vertical {id .5, flip .5};
    flip {id .5, flip_h .25, flip_v .25}; rotate {id .4, each rotation .2};
    perspective {id .5, random warp .5}.
    """
    kind = policy.kind
    if kind == "none":
        return ImageRaster(img.pixels.copy())
    if kind == "horizontal":
        return flip_h(img) if rng.random() < 0.5 else ImageRaster(img.pixels.copy())
    if kind == "vertical":
        return flip_v(img) if rng.random() < 0.5 else ImageRaster(img.pixels.copy())
    if kind == "flip":
        if rng.random() < 0.5:
            return flip_h(img) if rng.random() < 0.5 else flip_v(img)
        return ImageRaster(img.pixels.copy())
    if kind == "rotate":
        u = rng.random()
        if u < 0.6:
            return rotate90k(img, 1 + int(u / 0.2))
        return ImageRaster(img.pixels.copy())
    if kind == "perspective":
        if rng.random() < 0.5:
            return _random_perspective(img, policy.distortion_scale, rng)
        return ImageRaster(img.pixels.copy())
    raise ValueError(f"unknown policy {kind!r}")


# ---------------------------------------------------------------------------
# Toy encoder and feature files

@dataclass
class FeatureSet:
    """Per-image region feature vectors [R, F] plus one pooled global [F]."""
    regions: dict[str, np.ndarray]
    pooled: dict[str, np.ndarray]
    num_regions: int
    dim: int

    def ids(self):
        return list(self.regions.keys())

    def __contains__(self, image_id):
        return image_id in self.regions


def _cell_descriptors(img: ImageRaster, grid: int) -> np.ndarray:
    """8 stats per cell: mean RGB, mean gradient magnitude, cell center x/y,
    luminance std, constant 1. Channels scaled to [0, 1]."""
    pix = img.pixels.astype(np.float64) / 255.0
    lum = 0.299 * pix[..., 0] + 0.587 * pix[..., 1] + 0.114 * pix[..., 2]
    gy, gx = np.gradient(lum)
    grad = np.sqrt(gx * gx + gy * gy)

    h, w = img.height, img.width
    desc = np.zeros((grid * grid, 8))
    for i in range(grid):
        for j in range(grid):
            ys = slice(i * h // grid, (i + 1) * h // grid)
            xs = slice(j * w // grid, (j + 1) * w // grid)
            cell = pix[ys, xs]
            desc[i * grid + j] = [
                cell[..., 0].mean(), cell[..., 1].mean(), cell[..., 2].mean(),
                grad[ys, xs].mean(),
                (j + 0.5) / grid, (i + 0.5) / grid,
                lum[ys, xs].std(),
                1.0,
            ]
    return desc


def toy_encode(img: ImageRaster, grid: int = 4, dim: int = 64, seed: int = 0):
    """Deterministic stand-in for a pre-trained CNN encoder.

    Returns (regions [grid^2, dim] float32, pooled [dim] float32). The
    projection matrix depends only on the seed, so features are comparable
    across images and epochs.
    """
    if img.height < grid or img.width < grid:
        raise ValueError(f"image {img.width}x{img.height} smaller than {grid}x{grid} grid")
    proj = np.random.default_rng(seed).standard_normal((8, dim)) / np.sqrt(8.0)
    regions = (_cell_descriptors(img, grid) @ proj).astype(np.float32)
    pooled = regions.mean(axis=0)
    return regions, pooled


def encode_images(images: dict[str, ImageRaster], grid: int = 4, dim: int = 64,
                  seed: int = 0) -> FeatureSet:
    regions = {}
    pooled = {}
    for image_id, img in images.items():
        r, g = toy_encode(img, grid, dim, seed)
        regions[image_id] = r
        pooled[image_id] = g
    return FeatureSet(regions, pooled, grid * grid, dim)


def write_features(fs: FeatureSet) -> bytes:
    out = [FEATURE_MAGIC, struct.pack("<III", len(fs.regions), fs.num_regions, fs.dim)]
    for image_id in fs.regions:
        ident = image_id.encode("utf-8")
        out.append(struct.pack("<H", len(ident)))
        out.append(ident)
        block = np.concatenate([fs.regions[image_id],
                                fs.pooled[image_id][None, :]], axis=0)
        out.append(block.astype("<f4").tobytes())
    return b"".join(out)


def read_features(data: bytes) -> FeatureSet:
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"feature file: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FormatError("feature file: truncated header")
    count, num_regions, dim = struct.unpack_from("<III", data, 4)
    pos = 16
    regions = {}
    pooled = {}
    vec_bytes = (num_regions + 1) * dim * 4
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError("feature file: truncated id length")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len + vec_bytes > len(data):
            raise FormatError("feature file: truncated record")
        image_id = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        block = np.frombuffer(data, dtype="<f4", count=(num_regions + 1) * dim,
                              offset=pos).reshape(num_regions + 1, dim)
        pos += vec_bytes
        if image_id in regions:
            raise FormatError(f"feature file: duplicate id {image_id!r}")
        regions[image_id] = block[:num_regions].copy()
        pooled[image_id] = block[num_regions].copy()
    return FeatureSet(regions, pooled, num_regions, dim)


def load_features(path) -> FeatureSet:
    with open(path, "rb") as fh:
        return read_features(fh.read())


def save_features(path, fs: FeatureSet):
    with open(path, "wb") as fh:
        fh.write(write_features(fs))
