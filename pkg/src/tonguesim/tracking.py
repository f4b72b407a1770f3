"""Speckle tracking on 2D image sequences.

Patches are followed frame to frame by normalized cross-correlation on a
Gaussian pyramid. The pyramid is not decimated: level ``l`` is the image
blurred at scale ``2**(l-1)`` and sampled with stride ``2**l`` around the
point being tracked, which keeps the tracker exactly equivariant to
integer translations of the input.

Also holds the synthetic speckle generator used as a ground-truth source,
plane calibration, and the PGM / raw / trajectory-CSV formats.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import BindingError, DimensionError, InputError, ParameterError, SeedError

log = logging.getLogger(__name__)

DEFAULT_FRAME_RATE = 60.0


@dataclass(frozen=True, eq=False)
class ImageSequence:
    frames: np.ndarray          # (T, H, W) grayscale, 0..255
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        if f.ndim == 2:
            f = f[None]
        if f.ndim != 3 or len(f) == 0:
            raise InputError("an image sequence needs at least one 2D frame")
        if not self.frame_rate > 0:
            raise ParameterError("frame_rate must be > 0")
        object.__setattr__(self, "frames", f)

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class PlaneCalibration:
    """Embedding of an image plane into model space.

    Plane mm coordinates of a model point X (meters) are
    ``1000 * (X . axis_u, X . axis_v) - origin_mm``; pixels are mm divided
    by ``mm_per_pixel``. Image x maps along axis_u, image y along axis_v.
    """
    mm_per_pixel: float = 1.0
    origin_mm: tuple = (0.0, 0.0)
    axis_u: tuple = (1.0, 0.0, 0.0)
    axis_v: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.mm_per_pixel > 0:
            raise ParameterError("mm_per_pixel must be > 0")
        u = np.asarray(self.axis_u, float)
        v = np.asarray(self.axis_v, float)
        if u.shape != (3,) or v.shape != (3,):
            raise ParameterError("plane axes must be 3-vectors")
        if abs(u @ u - 1) > 1e-9 or abs(v @ v - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise ParameterError("plane axes must be orthonormal")
        if len(self.origin_mm) != 2:
            raise ParameterError("origin_mm must be a 2-vector")

    @classmethod
    def identity(cls, plane="midsagittal"):
        if plane == "coronal":
            return cls(1.0, (0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
        return cls(1.0, (0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0))

    @property
    def axes(self):
        return np.array([self.axis_u, self.axis_v], dtype=float)   # (2, 3)

    @property
    def normal(self):
        return np.cross(self.axis_u, self.axis_v)

    def model_to_plane_mm(self, points):
        return 1000.0 * np.asarray(points, float) @ self.axes.T - np.asarray(self.origin_mm, float)

    def plane_mm_to_model_displacement(self, d_mm):
        return 1e-3 * np.asarray(d_mm, float) @ self.axes

    def pixel_to_model_displacement(self, d_px):
        return self.plane_mm_to_model_displacement(np.asarray(d_px, float) * self.mm_per_pixel)


@dataclass(frozen=True)
class TrackingParams:
    patch_radius: int = 8
    search_radius: int = 12
    pyramid_levels: int = 2
    min_confidence: float = 0.4

    def __post_init__(self):
        if self.patch_radius < 2:
            raise ParameterError("patch_radius must be >= 2")
        if self.search_radius < 1:
            raise ParameterError("search_radius must be >= 1")
        if self.pyramid_levels < 1:
            raise ParameterError("pyramid_levels must be >= 1")
        if not -1.0 <= self.min_confidence <= 1.0:
            raise ParameterError("min_confidence must lie in [-1, 1]")


@dataclass(eq=False)
class TrackedTrajectorySet:
    seeds: np.ndarray          # (S, 2) x, y px
    positions: np.ndarray      # (S, T, 2)
    confidence: np.ndarray     # (S, T)
    lost: np.ndarray           # (S, T) bool
    frame_rate: float = DEFAULT_FRAME_RATE

    @property
    def n_seeds(self):
        return len(self.seeds)

    @property
    def n_frames(self):
        return self.positions.shape[1]

    def displacements(self, reference_frame=0):
        return self.positions - self.positions[:, reference_frame:reference_frame + 1]


# -- synthetic speckle --------------------------------------------------------

class AffineMotion:
    """Cumulative affine motion: frame k = base mapped by ``step`` applied k times.

    ``step`` is a 2x3 matrix acting on (x, y, 1) pixel coordinates.
    """

    def __init__(self, step):
        s = np.asarray(step, dtype=float)
        if s.shape != (2, 3):
            raise DimensionError("affine step must be 2x3")
        self.step = np.vstack([s, [0.0, 0.0, 1.0]])

    def matrix(self, k):
        return np.linalg.matrix_power(self.step, k)

    def forward(self, k, pts):
        p = np.asarray(pts, float)
        m = self.matrix(k)
        return p @ m[:2, :2].T + m[:2, 2]

    def inverse(self, k, x, y):
        m = np.linalg.inv(self.matrix(k))
        return m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2]


def translation_motion(dx, dy):
    return AffineMotion([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def rotation_motion(radians_per_frame, center):
    c, s = math.cos(radians_per_frame), math.sin(radians_per_frame)
    cx, cy = center
    return AffineMotion([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])


class FieldMotion:
    """Smooth displacement field: base point p sits at p + disp(k, p) in frame k."""

    def __init__(self, disp: Callable[[int, np.ndarray, np.ndarray], tuple], iterations=8):
        self.disp = disp
        self.iterations = iterations

    def forward(self, k, pts):
        p = np.asarray(pts, float)
        dx, dy = self.disp(k, p[..., 0], p[..., 1])
        return np.stack([p[..., 0] + dx, p[..., 1] + dy], axis=-1)

    def inverse(self, k, x, y):
        bx, by = x.copy(), y.copy()
        for _ in range(self.iterations):
            dx, dy = self.disp(k, bx, by)
            bx, by = x - dx, y - dy
        return bx, by


def synth_speckle_sequence(width, height, n_frames, motion=None, speckle_density=0.08,
                           noise_sigma=0.0, rng_seed=0, blob_sigma=1.2,
                           frame_rate=DEFAULT_FRAME_RATE) -> ImageSequence:
    """Gaussian-blob speckle moved by ``motion`` (AffineMotion / FieldMotion / None)."""
    if min(width, height) < 32:
        raise ParameterError("synthetic images must be at least 32x32")
    if n_frames < 1:
        raise ParameterError("n_frames must be >= 1")
    rng = np.random.default_rng(rng_seed)
    pad = max(width, height) // 2 + 8
    H, W = height + 2 * pad, width + 2 * pad
    n_blobs = int(round(speckle_density * H * W))
    cx = rng.uniform(0, W - 1, n_blobs)
    cy = rng.uniform(0, H - 1, n_blobs)
    amp = rng.uniform(0.3, 1.0, n_blobs)

    canvas = np.zeros((H, W))
    x0, y0 = np.floor(cx).astype(int), np.floor(cy).astype(int)
    fx, fy = cx - x0, cy - y0
    for ox, oy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        np.add.at(canvas, (np.minimum(y0 + oy, H - 1), np.minimum(x0 + ox, W - 1)), amp * wgt)
    base = ndimage.gaussian_filter(canvas, blob_sigma, mode="constant")
    base *= 200.0 / np.percentile(base, 99.5)

    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    frames = np.empty((n_frames, height, width))
    for k in range(n_frames):
        if k == 0 or motion is None:
            bx, by = xs, ys
        else:
            bx, by = motion.inverse(k, xs, ys)
        frames[k] = ndimage.map_coordinates(base, [by + pad, bx + pad], order=1, mode="nearest")
    if noise_sigma > 0:
        frames += rng.normal(0.0, noise_sigma, frames.shape)
    np.clip(frames, 0.0, 255.0, out=frames)
    return ImageSequence(frames, frame_rate)


# -- tracker ------------------------------------------------------------------

def ncc_map(template, windows):
    """NCC of a (p, p) template against a stack of (..., p, p) windows, in [-1, 1]."""
    t = template - template.mean()
    tn = np.sqrt(np.sum(t * t))
    w = windows - windows.mean(axis=(-2, -1), keepdims=True)
    wn = np.sqrt(np.sum(w * w, axis=(-2, -1)))
    num = np.einsum("...ij,ij->...", w, t)
    den = tn * wn
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 1e-12, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def _sample(img, cx, cy, half, stride):
    """Samples img on a (2 half + 1)^2 grid centred at (cx, cy) with the given stride."""
    o = stride * np.arange(-half, half + 1, dtype=float)
    gy, gx = np.meshgrid(cy + o, cx + o, indexing="ij")
    return ndimage.map_coordinates(img, [gy, gx], order=1, mode="nearest")


def _quadratic_peak(c3):
    """Subpixel offset of the maximum of a 3x3 score patch (least-squares quadratic)."""
    yy, xx = np.mgrid[-1:2, -1:2]
    X = np.column_stack([np.ones(9), xx.ravel(), yy.ravel(),
                         xx.ravel() ** 2, (xx * yy).ravel(), yy.ravel() ** 2])
    a, bx, by, cxx, cxy, cyy = np.linalg.lstsq(X, c3.ravel(), rcond=None)[0]
    Hm = np.array([[2 * cxx, cxy], [cxy, 2 * cyy]])
    if np.linalg.det(Hm) > 0 and Hm[0, 0] < 0:
        off = np.linalg.solve(Hm, [-bx, -by])
        if np.all(np.abs(off) <= 1.0):
            return off
    # fall back to independent 1D parabolas
    off = np.zeros(2)
    for i, (m, c, p) in enumerate(((c3[1, 0], c3[1, 1], c3[1, 2]), (c3[0, 1], c3[1, 1], c3[2, 1]))):
        den = m - 2 * c + p
        if den < 0:
            off[i] = np.clip(0.5 * (m - p) / den, -0.5, 0.5)
    return off


class _Pyramid:
    def __init__(self, frame, levels):
        self.levels = [frame]
        for l in range(1, levels):
            self.levels.append(ndimage.gaussian_filter(frame, 2.0 ** (l - 1), mode="nearest"))


REFINE_ITERATIONS = 3
REFERENCE_SLACK = 0.05   # accept the reference match if its NCC is within this of the pair match


def _scores(tpl, img, c, stride, R, S):
    region = _sample(img, c[0], c[1], R + S, stride)
    return ncc_map(tpl, sliding_window_view(region, (2 * R + 1, 2 * R + 1)))


def _refine(tpl, img, c, R):
    """Hill-climb to the best integer neighbour, then refine with quadratic peak estimates."""
    c = np.array(c, dtype=float)
    for _ in range(4):
        c3 = _scores(tpl, img, c, 1, R, 1)
        k = int(np.argmax(c3))
        if k == 4:
            break
        c += (k % 3 - 1, k // 3 - 1)
    # quadratic-peak proposals, kept only while they raise the centre score
    # (NCC against a fixed template is not symmetric about its peak)
    for _ in range(REFINE_ITERATIONS):
        off = _quadratic_peak(c3)
        if np.max(np.abs(off)) < 0.01:
            break
        for frac in (1.0, 0.5):
            trial = _scores(tpl, img, c + frac * off, 1, R, 1)
            if trial[1, 1] > c3[1, 1]:
                c, c3 = c + frac * off, trial
                break
        else:
            break
    return c, float(c3[1, 1])


def _track_pair(prev_pyr, next_pyr, p, params):
    """Coarse-to-fine integer search, then subpixel refinement at level 0."""
    R = params.patch_radius
    L = params.pyramid_levels
    d = np.zeros(2)
    for l in range(L - 1, -1, -1):
        s = 2 ** l
        S = math.ceil(params.search_radius / s) if l == L - 1 else 2
        tpl = _sample(prev_pyr.levels[l], p[0], p[1], R, s)
        scores = _scores(tpl, next_pyr.levels[l], p + d, s, R, S)
        iy, ix = np.unravel_index(np.argmax(scores), scores.shape)
        d = d + s * np.array([ix - S, iy - S], dtype=float)
    tpl = _sample(prev_pyr.levels[0], p[0], p[1], R, 1)
    return _refine(tpl, next_pyr.levels[0], p + d, R)


def track_points(seq: ImageSequence, seeds, params: TrackingParams = TrackingParams()) -> TrackedTrajectorySet:
    """Frame-to-frame pyramidal NCC tracking with subpixel peak refinement.

    After each frame-to-frame match the seed's first-frame patch is matched
    again near the new position; when that score is about as good, its
    position is taken. Small per-pair subpixel errors then stop accumulating
    while the first-frame patch still looks like the tissue.
    """
    if seq is None or len(seq) == 0:
        raise InputError("empty image sequence")
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    R = params.patch_radius
    lo = R
    hi_x, hi_y = seq.width - 1 - R, seq.height - 1 - R
    for i, (x, y) in enumerate(seeds):
        if not (lo <= x <= hi_x and lo <= y <= hi_y):
            raise SeedError(f"seed {i} at ({x}, {y}) is within {R} px of the image border")

    S, T = len(seeds), len(seq)
    pos = np.zeros((S, T, 2))
    conf = np.ones((S, T))
    lost = np.zeros((S, T), dtype=bool)
    pos[:, 0] = seeds
    cur = seeds.copy()
    prev_pyr = _Pyramid(seq.frames[0], params.pyramid_levels)
    ref = [_sample(prev_pyr.levels[0], x, y, R, 1) for x, y in seeds]
    for k in range(1, T):
        next_pyr = _Pyramid(seq.frames[k], params.pyramid_levels)
        for i in range(S):
            new, c = _track_pair(prev_pyr, next_pyr, cur[i], params)
            if c >= params.min_confidence:
                alt, c_ref = _refine(ref[i], next_pyr.levels[0], new, R)
                if c_ref >= c - REFERENCE_SLACK and np.max(np.abs(alt - new)) <= 1.0:
                    new = alt
            inside = lo <= new[0] <= hi_x and lo <= new[1] <= hi_y
            conf[i, k] = c
            if c < params.min_confidence or not inside:
                lost[i, k] = True
            else:
                cur[i] = new
            pos[i, k] = cur[i]
        prev_pyr = next_pyr
    return TrackedTrajectorySet(seeds, pos, conf, lost, seq.frame_rate)


def trajectories_to_timeline(tracks: TrackedTrajectorySet, calibration: PlaneCalibration,
                             node_binding, reference_frame=0):
    """Pixel trajectories to per-frame 3D node targets (meters)."""
    from .dynamics import ConstraintTimeline

    if isinstance(node_binding, dict):
        missing = [i for i in range(tracks.n_seeds) if i not in node_binding]
        if missing:
            raise BindingError(f"seeds {missing} have no node binding")
        nodes = [int(node_binding[i]) for i in range(tracks.n_seeds)]
    else:
        nodes = [int(n) for n in node_binding]
        if len(nodes) != tracks.n_seeds:
            raise BindingError(f"{tracks.n_seeds} seeds but {len(nodes)} bound nodes")
    if len(set(nodes)) != len(nodes):
        dup = sorted({n for n in nodes if nodes.count(n) > 1})
        raise BindingError(f"nodes {dup} are bound to more than one seed")
    if not -tracks.n_frames <= reference_frame < tracks.n_frames:
        raise ParameterError(f"reference_frame {reference_frame} outside sequence of {tracks.n_frames}")
    d_px = tracks.displacements(reference_frame)                   # (S, T, 2)
    d3 = calibration.pixel_to_model_displacement(d_px)              # (S, T, 3)
    return ConstraintTimeline(np.array(nodes), np.transpose(d3, (1, 0, 2)),
                              tracks.frame_rate, lost=tracks.lost.T)


# -- file formats ---------------------------------------------------------------

def _pgm_tokens(data, path, count):
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise InputError(f"{path}: truncated PGM header")
        try:
            tokens.append(int(data[i:j]))
        except ValueError:
            raise InputError(f"{path}: bad PGM header field {data[i:j]!r}") from None
        i = j
    return tokens, i + 1


def read_pgm(path):
    """Binary (P5) PGM, 8 or 16 bit, as a float array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    if data[:2] != b"P5":
        raise InputError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), start = _pgm_tokens(data, path, 3)
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise InputError(f"{path}: invalid PGM header values {w}x{h} maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(data) - start < need:
        raise InputError(f"{path}: PGM pixel data truncated")
    img = np.frombuffer(data, dtype, w * h, start).reshape(h, w).astype(float)
    return img * (255.0 / maxval) if maxval != 255 else img


def write_pgm(path, image):
    img = np.clip(np.rint(np.asarray(image, float)), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    return Path(path)


def _frame_number(p):
    m = re.findall(r"\d+", p.stem)
    return int(m[-1]) if m else -1


def read_pgm_sequence(directory, frame_rate=DEFAULT_FRAME_RATE) -> ImageSequence:
    directory = Path(directory)
    files = sorted(directory.glob("*.pgm"), key=lambda p: (_frame_number(p), p.name))
    if not files:
        raise InputError(f"{directory}: no .pgm frames found")
    frames = [read_pgm(f) for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise InputError(f"{directory}: frames have differing sizes {sorted(shapes)}")
    return ImageSequence(np.stack(frames), frame_rate)


def write_pgm_sequence(seq: ImageSequence, directory, prefix="frame"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(seq) - 1)))
    return [write_pgm(directory / f"{prefix}_{k:0{width}d}.pgm", f) for k, f in enumerate(seq.frames)]


RAW_MAGIC = "USRAW"


def read_raw_sequence(path) -> ImageSequence:
    """Concatenated 8-bit frames behind a one-line ASCII header:
    ``USRAW <width> <height> <n_frames> <frame_rate>\\n``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    nl = data.find(b"\n")
    head = data[:nl].decode("ascii", "replace").split() if nl > 0 else []
    if len(head) != 5 or head[0] != RAW_MAGIC:
        raise InputError(f"{path}: bad raw sequence header")
    try:
        w, h, n = int(head[1]), int(head[2]), int(head[3])
        rate = float(head[4])
    except ValueError:
        raise InputError(f"{path}: bad raw sequence header") from None
    if len(data) - nl - 1 != w * h * n:
        raise InputError(f"{path}: expected {w * h * n} pixel bytes, found {len(data) - nl - 1}")
    frames = np.frombuffer(data, np.uint8, w * h * n, nl + 1).reshape(n, h, w).astype(float)
    return ImageSequence(frames, rate)


def write_raw_sequence(seq: ImageSequence, path):
    frames = np.clip(np.rint(seq.frames), 0, 255).astype(np.uint8)
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(f"{RAW_MAGIC} {w} {h} {n} {seq.frame_rate!r}\n".encode())
        fh.write(frames.tobytes())
    return Path(path)


TRAJECTORY_HEADER = ["frame", "seed_id", "x_px", "y_px", "confidence"]


def write_trajectories(tracks: TrackedTrajectorySet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for k in range(tracks.n_frames):
            for i in range(tracks.n_seeds):
                x, y = tracks.positions[i, k]
                w.writerow([k, i, repr(float(x)), repr(float(y)), repr(float(tracks.confidence[i, k]))])
    return Path(path)


def read_trajectories(path, frame_rate=DEFAULT_FRAME_RATE, min_confidence=None) -> TrackedTrajectorySet:
    """Load the trajectory CSV; rows whose confidence is below ``min_confidence`` are flagged lost."""
    path = Path(path)
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise InputError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: malformed trajectory row {row!r}") from None
    if not rows:
        raise InputError(f"{path}: no trajectory rows")
    arr = np.array(rows)
    frames = arr[:, 0].astype(int)
    seeds = arr[:, 1].astype(int)
    T, S = frames.max() + 1, seeds.max() + 1
    if frames.min() < 0 or seeds.min() < 0 or len(arr) != T * S:
        raise InputError(f"{path}: trajectory table is not a complete frame x seed grid")
    pos = np.full((S, T, 2), np.nan)
    conf = np.zeros((S, T))
    pos[seeds, frames] = arr[:, 2:4]
    conf[seeds, frames] = arr[:, 4]
    if np.isnan(pos).any():
        raise InputError(f"{path}: duplicate or missing (frame, seed) rows")
    lost = np.zeros((S, T), bool) if min_confidence is None else conf < min_confidence
    lost[:, 0] = False
    return TrackedTrajectorySet(pos[:, 0].copy(), pos, conf, lost, frame_rate)
