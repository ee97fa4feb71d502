"""Deterministic synthetic indoor scenes, renders and sparse-depth sampling.

A scene is an enclosing box room plus a handful of spheres, oriented boxes
and finite panels. Cameras follow a Catmull-Rom spline through random
waypoints while looking at the object centroid. Depth is exact ray casting
(z-depth), the image a Lambert-shaded grayscale render.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import ContractError, DegenerateInputError, FormatError
from .fileio import read_kv, read_poses, read_rows, write_poses, write_rows
from .geometry import CameraPose, make_intrinsics, pixel_rays, random_rotation, unproject_depth
from .numkernel import Rng, load_gten, save_gten

NEAR_CLIP = 0.05
IMAGE_ONLY_PROB = 0.10
MODALITY_PROB = 0.50
MAX_TRAJECTORY_ATTEMPTS = 10
HEADLIGHT_FALLOFF = 0.15
_UP = np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Primitives: each returns (t, world normal) for a bundle of rays
# ---------------------------------------------------------------------------
@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: float = 0.8

    def intersect(self, o, d):
        oc = o - self.center
        a = np.einsum("ij,ij->i", d, d)
        b = 2 * np.einsum("ij,j->i", d, oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        t = np.full(len(d), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(ok & (t0 > 0), t0, np.where(ok & (t1 > 0), t1, np.inf))
        n = (o + t[:, None] * d - self.center) / self.radius
        return t, n

    def bounding_radius(self) -> float:
        return self.radius

    def to_text(self) -> str:
        return "sphere " + _fmt(self.center) + f" {self.radius!r} {self.albedo!r}"


@dataclass
class Box:
    """Oriented box; ``R`` maps box axes to world. ``inside`` renders it as a room."""

    center: np.ndarray
    half: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    albedo: float = 0.7
    inside: bool = False

    def intersect(self, o, d):
        lo = (o - self.center) @ self.R          # box-frame origin
        ld = d @ self.R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-self.half - lo) * inv
            t2 = (self.half - lo) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = tmax >= np.maximum(tmin, 0.0)
        if self.inside:
            t = np.where(hit, tmax, np.inf)
            axis_t = np.maximum(t1, t2)
        else:
            t = np.where(hit & (tmin > 0), tmin, np.where(hit & (tmax > 0), tmax, np.inf))
            axis_t = np.where((tmin > 0)[:, None], np.minimum(t1, t2), np.maximum(t1, t2))
        axis = np.argmin(np.abs(axis_t - t[:, None]), axis=1)
        ln = np.zeros_like(ld)
        rows = np.arange(len(d))
        ln[rows, axis] = -np.sign(ld[rows, axis])
        return t, ln @ self.R.T

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half))

    def to_text(self) -> str:
        kind = "room" if self.inside else "box"
        return f"{kind} " + _fmt(self.center) + " " + _fmt(self.half) + " " + _fmt(self.R.reshape(-1)) \
            + f" {self.albedo!r}"


@dataclass
class Panel:
    """Finite rectangle through ``center`` spanned by unit axes ``u`` and ``v``."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float
    albedo: float = 0.6

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def intersect(self, o, d):
        n = self.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ n) / denom
        x = o + t[:, None] * d - self.center
        inside = (np.abs(x @ self.u) <= self.half_u) & (np.abs(x @ self.v) <= self.half_v)
        t = np.where(inside & (t > 0) & np.isfinite(t), t, np.inf)
        nn = np.where((denom < 0)[:, None], n, -n)
        return t, nn

    def bounding_radius(self) -> float:
        return float(np.hypot(self.half_u, self.half_v))

    def to_text(self) -> str:
        return "panel " + " ".join([_fmt(self.center), _fmt(self.u), _fmt(self.v)]) + \
            f" {self.half_u!r} {self.half_v!r} {self.albedo!r}"


def _fmt(a) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(a))


def parse_primitive(line: str):
    kind, *rest = line.split()
    v = np.array([float(x) for x in rest])
    if kind == "sphere":
        return Sphere(v[:3], float(v[3]), float(v[4]))
    if kind in ("box", "room"):
        return Box(v[:3], v[3:6], v[6:15].reshape(3, 3), float(v[15]), kind == "room")
    if kind == "panel":
        return Panel(v[:3], v[3:6], v[6:9], float(v[9]), float(v[10]), float(v[11]))
    raise FormatError(f"unknown primitive {kind!r}")


@dataclass
class SceneSpec:
    primitives: list
    light: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.2, 0.93]))

    def to_text(self) -> str:
        return "\n".join(["light " + _fmt(self.light)] + [p.to_text() for p in self.primitives])

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        prims, light = [], None
        for line in text.strip().splitlines():
            if line.startswith("light "):
                light = np.array([float(x) for x in line.split()[1:]])
            elif line.strip():
                prims.append(parse_primitive(line))
        return cls(prims, light if light is not None else cls([]).light)

    def objects(self) -> list:
        return [p for p in self.primitives if not (isinstance(p, Box) and p.inside)]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
def render_view(spec: SceneSpec, pose: CameraPose, K, H: int, W: int):
    """Ray-cast one view.

    Returns:
        (image (H, W, 1), depth (H, W), valid (H, W)); depth is z in the
        camera frame, zero where there is no hit beyond the near clip.
    """
    rays = pixel_rays(K, H, W).reshape(-1, 3)    # camera frame, z = 1
    d = rays @ pose.R                            # world directions; ray parameter equals z-depth
    o = pose.center()
    best = np.full(len(d), np.inf)
    normal = np.zeros_like(d)
    albedo = np.zeros(len(d))
    for prim in spec.primitives:
        t, n = prim.intersect(o, d)
        closer = t < best
        best = np.where(closer, t, best)
        normal[closer] = n[closer]
        albedo[closer] = prim.albedo
    valid = np.isfinite(best) & (best > NEAR_CLIP)
    depth = np.where(valid, best, 0.0)
    light = spec.light / np.linalg.norm(spec.light)
    dist = np.linalg.norm(d, axis=1)
    view = -d / dist[:, None]
    dist = dist * np.where(np.isfinite(best), best, 0.0)
    lambert = np.clip(normal @ light, 0.0, None)
    # headlight with distance falloff, so brightness also encodes range
    head = np.abs(np.einsum("ij,ij->i", normal, view)) / (1.0 + HEADLIGHT_FALLOFF * dist ** 2)
    image = np.where(valid, albedo * (0.1 + 0.3 * lambert + 0.6 * head), 0.0)
    return image.reshape(H, W, 1), depth.reshape(H, W), valid.reshape(H, W)


def look_at(center, target, up=_UP) -> CameraPose:
    """World-to-camera pose with x right, y down, z toward ``target``."""
    f = np.asarray(target, float) - center
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
    r /= np.linalg.norm(r)
    down = np.cross(f, r)
    R = np.stack([r, down, f])
    return CameraPose(R, -R @ np.asarray(center, float))


def catmull_rom(points: np.ndarray, n: int) -> np.ndarray:
    """``n`` samples evenly spaced in spline parameter along a uniform Catmull-Rom curve."""
    P = np.concatenate([2 * points[:1] - points[1:2], points, 2 * points[-1:] - points[-2:-1]])
    segs = len(points) - 1
    out = []
    for s in np.linspace(0.0, segs, n) if n > 1 else [0.0]:
        i = min(int(s), segs - 1)
        u = s - i
        p0, p1, p2, p3 = P[i:i + 4]
        out.append(0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u ** 2
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * u ** 3))
    return np.array(out)


@dataclass
class Frame:
    image: np.ndarray       # (H, W, 1)
    depth: np.ndarray       # (H, W), 0 where invalid
    pose: CameraPose
    K: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def local_points(self) -> np.ndarray:
        return unproject_depth(self.depth, self.K)


@dataclass
class SceneSequence:
    frames: list
    scene_spec: SceneSpec
    seed: int

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].depth.shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].depth.shape[1]

    @property
    def depth(self) -> np.ndarray:
        return np.stack([f.depth for f in self.frames])

    @property
    def valid(self) -> np.ndarray:
        return np.stack([f.valid for f in self.frames])

    @property
    def local_points(self) -> np.ndarray:
        return np.stack([f.local_points() for f in self.frames])

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([f.pose.R for f in self.frames])

    @property
    def translations(self) -> np.ndarray:
        return np.stack([f.pose.T for f in self.frames])

    @property
    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    def global_points(self) -> np.ndarray:
        """World-frame point maps ``X = R^T (P - T)``."""
        return np.stack([(f.local_points() - f.pose.T) @ f.pose.R for f in self.frames])

    def crop(self, start: int, length: int) -> "SceneSequence":
        if length < 1 or start < 0 or start + length > len(self):
            raise ContractError(f"crop [{start}, {start + length}) outside sequence of {len(self)}")
        return SceneSequence(self.frames[start:start + length], self.scene_spec, self.seed)

    def bundles(self, mask: "ModalityMask | None" = None, seed: int = 0) -> list:
        """Model input frames, with modalities attached according to ``mask``."""
        from .model import FrameBundle
        out = []
        for i, f in enumerate(self.frames):
            b = FrameBundle(f.image[..., 0], frame_id=i)
            if mask is not None:
                if mask.has_depth[i]:
                    b.depth = sparsify_depth(f.depth, mask.patterns[i], seed * 1009 + i, image=f.image[..., 0])
                    b.depth_valid = b.depth > 0
                if mask.has_intrinsics[i]:
                    b.K = f.K
                if mask.has_extrinsics[i]:
                    b.pose = f.pose
            out.append(b)
        return out


def render_scene(spec: SceneSpec, poses: list, K, H: int, W: int, seed: int = 0) -> SceneSequence:
    frames = []
    for pose in poses:
        img, depth, _ = render_view(spec, pose, K, H, W)
        frames.append(Frame(img, depth, pose, np.asarray(K, float)))
    return SceneSequence(frames, spec, seed)


def random_scene_spec(rng: Rng) -> SceneSpec:
    """Room of 2-10 m per side plus 3-8 primitives near its middle."""
    dims = rng.uniform(2.0, 10.0, 3)
    half = dims / 2
    room = Box(np.array([0.0, 0.0, half[2]]), half, np.eye(3), rng.uniform(0.4, 0.9), inside=True)
    prims = [room]
    small = float(half.min())
    for _ in range(int(rng.integers(3, 9))):
        kind = int(rng.integers(0, 3))
        c = np.array([rng.uniform(-0.45, 0.45) * half[0], rng.uniform(-0.45, 0.45) * half[1],
                      rng.uniform(0.15, 0.85) * dims[2]])
        size = rng.uniform(0.08, 0.2) * small
        alb = rng.uniform(0.3, 1.0)
        if kind == 0:
            prims.append(Sphere(c, size, alb))
        elif kind == 1:
            prims.append(Box(c, size * rng.uniform(0.5, 1.0, 3), random_rotation(rng), alb))
        else:
            R = random_rotation(rng)
            prims.append(Panel(c, R[:, 0], R[:, 1], size * rng.uniform(0.8, 1.6),
                               size * rng.uniform(0.8, 1.6), alb))
    light = rng.normal(0, 1, 3)
    light[2] = abs(light[2]) + 0.5
    return SceneSpec(prims, light)


def _trajectory(rng: Rng, spec: SceneSpec, n_frames: int):
    room = spec.primitives[0]
    half, zc = room.half, room.center[2]
    objs = spec.objects()
    centroid = np.mean([p.center for p in objs], axis=0)
    a0 = rng.uniform(0, 2 * np.pi)
    sweep = rng.uniform(0.3, 1.2) * rng.choice([-1.0, 1.0])
    n_way = 4
    ang = a0 + sweep * np.linspace(0, 1, n_way)
    rad = rng.uniform(0.6, 0.8, n_way)
    way = np.stack([rad * np.cos(ang) * half[0], rad * np.sin(ang) * half[1],
                    zc + rng.uniform(-0.35, 0.35, n_way) * half[2]], axis=1)
    centers = catmull_rom(way, n_frames)
    jitter = 0.05 * float(half.min())
    targets = centroid + rng.normal(0, jitter, (n_frames, 3))
    return centers, targets


def _trajectory_ok(spec: SceneSpec, centers: np.ndarray) -> bool:
    if len(centers) > 1 and np.linalg.norm(np.diff(centers, axis=0), axis=1).sum() < 1e-6:
        return False
    room = spec.primitives[0]
    if np.any(np.abs(centers - room.center) > room.half - NEAR_CLIP * 4):
        return False
    for p in spec.objects():
        if np.any(np.linalg.norm(centers - p.center, axis=1) < p.bounding_radius() + 0.1):
            return False
    return True


def generate_scene(seed: int, n_frames: int, H: int = 32, W: int = 32, fov_deg: float | None = None) -> SceneSequence:
    """Random room, objects and camera path, fully determined by ``seed``.

    Raises:
        DegenerateInputError: no valid trajectory after the allowed attempts.
    """
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")
    rng = Rng(seed)
    spec = random_scene_spec(rng.child(0))
    fov = np.deg2rad(rng.uniform(50, 70) if fov_deg is None else fov_deg)
    f = 0.5 * W / np.tan(fov / 2)
    K = make_intrinsics(f, f, W / 2, H / 2)
    for attempt in range(MAX_TRAJECTORY_ATTEMPTS):
        centers, targets = _trajectory(rng.child(1, attempt), spec, n_frames)
        if _trajectory_ok(spec, centers):
            break
    else:
        raise DegenerateInputError(f"no valid trajectory for seed {seed} after {MAX_TRAJECTORY_ATTEMPTS} attempts")
    poses = [look_at(c, t) for c, t in zip(centers, targets)]
    return render_scene(spec, poses, K, H, W, seed)


# ---------------------------------------------------------------------------
# Modalities and sparse depth
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DepthPattern:
    """Sparse-depth sampling pattern: uniform(d), lidar(b), sfm, or grid(k)."""

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "lidar", "sfm", "grid"):
            raise ContractError(f"unknown depth pattern {self.kind!r}")
        if self.kind in ("lidar", "grid") and (self.param < 1 or self.param != int(self.param)):
            raise ContractError(f"{self.kind} parameter must be an integer >= 1, got {self.param}")
        if self.kind == "uniform" and not 0.0 <= self.param <= 1.0:
            raise ContractError(f"uniform density must lie in [0, 1], got {self.param}")

    def __str__(self) -> str:
        if self.kind == "sfm":
            return "sfm"
        p = int(self.param) if self.kind in ("lidar", "grid") else self.param
        return f"{self.kind}:{p}"

    @classmethod
    def parse(cls, text: str) -> "DepthPattern":
        kind, _, p = text.partition(":")
        try:
            return cls(kind, float(p) if p else 0.0)
        except ValueError:
            raise ContractError(f"bad depth pattern {text!r}") from None


def uniform(d: float) -> DepthPattern:
    return DepthPattern("uniform", d)


def lidar(beams: int) -> DepthPattern:
    return DepthPattern("lidar", beams)


def grid(k: int) -> DepthPattern:
    return DepthPattern("grid", k)


SFM = DepthPattern("sfm")


def lidar_rows(H: int, beams: int) -> np.ndarray:
    """Centers of ``beams`` equal horizontal bands, ties rounded up the image; clamped to H beams.

    Band i is centred at ``(i + 0.5) H / b - 0.5`` in row units. Rounding half
    down reproduces the least-variance spacing (margins counted as half gaps),
    preferring the upper rows when two placements tie.
    """
    if beams < 1:
        raise ContractError(f"beam count must be >= 1, got {beams}")
    b = min(int(beams), H)
    return np.ceil((np.arange(b) + 0.5) * H / b - 1.0 - 1e-9).astype(int)


def sfm_keypoints(image: np.ndarray, valid: np.ndarray, fraction: float) -> np.ndarray:
    """Strongest local maxima of image gradient magnitude, ``fraction`` of all pixels."""
    gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
    mag = np.hypot(gx, gy)
    peaks = (mag == maximum_filter(mag, size=3, mode="nearest")) & (mag > 0) & valid
    n_keep = max(1, int(round(fraction * image.size)))
    idx = np.flatnonzero(peaks)
    # strongest first; ties broken by pixel order for determinism
    order = idx[np.lexsort((idx, -mag.ravel()[idx]))][:n_keep]
    keep = np.zeros(image.size, bool)
    keep[order] = True
    return keep.reshape(image.shape)


def pattern_mask(pattern: DepthPattern, valid: np.ndarray, seed: int, image=None) -> np.ndarray:
    H, W = valid.shape
    rng = Rng(seed)
    if pattern.kind == "uniform":
        keep = rng.random((H, W)) < pattern.param
    elif pattern.kind == "lidar":
        keep = np.zeros((H, W), bool)
        keep[lidar_rows(H, int(pattern.param))] = True
    elif pattern.kind == "grid":
        k = int(pattern.param)
        vv, uu = np.mgrid[0:H, 0:W]
        keep = (uu % k == 0) & (vv % k == 0)
    else:
        fraction = rng.uniform(0.01, 0.05)
        keep = sfm_keypoints(np.zeros((H, W)) if image is None else image, valid, fraction)
    return keep & valid


def sparsify_depth(depth, pattern, seed: int = 0, image=None, noise_sigma: float = 0.0) -> np.ndarray:
    """Depth map keeping only the pixels selected by ``pattern`` (others 0).

    Retained values are exact copies unless ``noise_sigma`` > 0. The SFM
    pattern uses ``image`` gradients and falls back to depth gradients.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if isinstance(pattern, str):
        pattern = DepthPattern.parse(pattern)
    valid = depth > 0
    src = depth if image is None else image
    keep = pattern_mask(pattern, valid, seed, src)
    out = np.where(keep, depth, 0.0)
    if noise_sigma > 0:
        noisy = out + Rng(seed).child(7).normal(0.0, noise_sigma, out.shape)
        out = np.where(keep, np.maximum(noisy, NEAR_CLIP), 0.0)
    return out


@dataclass
class ModalityMask:
    has_depth: np.ndarray
    has_intrinsics: np.ndarray
    has_extrinsics: np.ndarray
    patterns: list
    image_only: bool = False


def random_pattern(rng: Rng, H: int = 32) -> DepthPattern:
    kind = int(rng.integers(0, 4))
    if kind == 0:
        return uniform(float(rng.uniform(0.0, 1.0)))
    if kind == 1:
        return lidar(int(rng.integers(1, 129)))
    if kind == 2:
        return SFM
    return grid(int(rng.integers(1, 17)))


def sample_modalities(seed: int, n_frames: int, image_only_prob: float = IMAGE_ONLY_PROB,
                      modality_prob: float = MODALITY_PROB) -> ModalityMask:
    """Image-only with probability 0.1, else each modality of each frame w.p. 0.5."""
    rng = Rng(seed)
    if rng.random() < image_only_prob:
        off = np.zeros(n_frames, bool)
        return ModalityMask(off, off.copy(), off.copy(), [None] * n_frames, True)
    flags = rng.random((3, n_frames)) < modality_prob
    prng = rng.child(1)
    patterns = [random_pattern(prng) if flags[0, i] else None for i in range(n_frames)]
    return ModalityMask(flags[0], flags[1], flags[2], patterns, False)


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------
def write_scene(scene: SceneSequence, root) -> Path:
    """images/NNN.gten, depth/NNN.gten, poses.txt, intrinsics.txt, manifest.txt."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    for i, f in enumerate(scene.frames):
        save_gten(root / "images" / f"{i:03d}.gten", f.image)
        save_gten(root / "depth" / f"{i:03d}.gten", f.depth)
    write_poses(root / "poses.txt", [f.pose for f in scene.frames])
    write_rows(root / "intrinsics.txt", [f.K.ravel() for f in scene.frames])
    spec = scene.scene_spec.to_text().replace("\n", " | ")
    (root / "manifest.txt").write_text(
        f"seed={scene.seed}\nframes={len(scene)}\nheight={scene.height}\nwidth={scene.width}\n"
        f"valid_pixels={int(scene.valid.sum())}\nspec={spec}\n")
    return root


def read_scene(root) -> SceneSequence:
    root = Path(root)
    try:
        man = read_kv(root / "manifest.txt")
        n = int(man["frames"])
        poses = read_poses(root / "poses.txt")
        Ks = read_rows(root / "intrinsics.txt", 9)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        raise FormatError(f"{root}: incomplete scene directory ({exc})") from None
    if len(poses) != n or len(Ks) != n:
        raise FormatError(f"{root}: manifest lists {n} frames")
    frames = []
    for i in range(n):
        frames.append(Frame(load_gten(root / "images" / f"{i:03d}.gten"),
                            load_gten(root / "depth" / f"{i:03d}.gten"), poses[i], Ks[i].reshape(3, 3)))
    spec = SceneSpec.from_text(man.get("spec", "").replace(" | ", "\n"))
    return SceneSequence(frames, spec, int(man.get("seed", 0)))


def scene_seeds(seed: int, n_scenes: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint32)]


def generate_dataset(root, n_scenes: int, n_frames: int, H: int = 32, W: int = 32, seed: int = 0) -> list:
    """Write ``n_scenes`` scenes under ``root`` plus a manifest of their seeds."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = scene_seeds(seed, n_scenes)
    for i, s in enumerate(seeds):
        write_scene(generate_scene(s, n_frames, H, W), root / f"scene_{i:03d}")
    (root / "manifest.txt").write_text(
        f"seed={seed}\nscenes={n_scenes}\nframes={n_frames}\ntotal_frames={n_scenes * n_frames}\n"
        f"height={H}\nwidth={W}\n"
        + "".join(f"scene_{i:03d}={s}\n" for i, s in enumerate(seeds)))
    return seeds


def load_dataset(root) -> list:
    root = Path(root)
    try:
        man = read_kv(root / "manifest.txt")
    except FileNotFoundError:
        raise FormatError(f"{root}: no dataset manifest") from None
    names = sorted(k for k in man if k.startswith("scene_"))
    if not names:
        raise FormatError(f"{root}: dataset manifest lists no scenes")
    return [read_scene(root / n) for n in names]
