"""Plain-text tables, key=value files and the prediction export layout."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import CameraPose
from .numkernel import load_gten, save_gten


def write_rows(path, rows) -> None:
    """One whitespace-separated line per row, floats written round-trip exact."""
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in r) + "\n" for r in rows))


def read_rows(path, width: int) -> np.ndarray:
    path = Path(path)
    try:
        rows = [[float(x) for x in line.split()] for line in path.read_text().splitlines() if line.strip()]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, width) if rows else np.zeros((0, width))
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: expected {width} numbers per line")
    return arr


def pose_row(pose: CameraPose) -> np.ndarray:
    return np.concatenate([pose.R, pose.T[:, None]], axis=1).ravel()


def pose_from_row(row) -> CameraPose:
    M = np.asarray(row, dtype=np.float64).reshape(3, 4)
    return CameraPose(M[:, :3].copy(), M[:, 3].copy())


def write_poses(path, poses) -> None:
    write_rows(path, [pose_row(p) for p in poses])


def read_poses(path) -> list:
    return [pose_from_row(r) for r in read_rows(path, 12)]


def read_kv(path) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def format_kv(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def write_kv(path, d: dict) -> None:
    Path(path).write_text(format_kv(d))


@dataclass
class Predictions:
    points: np.ndarray          # (N, H, W, 3) local point maps
    confidence: np.ndarray      # (N, H, W)
    poses: list
    manifest: dict

    def __len__(self) -> int:
        return len(self.points)


def save_predictions(root, points, confidence, poses, manifest: dict) -> Path:
    """points/NNN.gten, confidence/NNN.gten, poses.txt and manifest.txt under ``root``."""
    root = Path(root)
    (root / "points").mkdir(parents=True, exist_ok=True)
    (root / "confidence").mkdir(exist_ok=True)
    for i in range(len(points)):
        save_gten(root / "points" / f"{i:03d}.gten", np.asarray(points[i]))
        save_gten(root / "confidence" / f"{i:03d}.gten", np.asarray(confidence[i]))
    write_poses(root / "poses.txt", poses)
    write_kv(root / "manifest.txt", {"frames": len(points), **manifest})
    return root


def load_predictions(root) -> Predictions:
    root = Path(root)
    try:
        man = read_kv(root / "manifest.txt")
        n = int(man["frames"])
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise FormatError(f"{root}: not a prediction export ({exc})") from None
    poses = read_poses(root / "poses.txt")
    if len(poses) != n:
        raise FormatError(f"{root}: {len(poses)} poses for {n} frames")
    pts = np.stack([load_gten(root / "points" / f"{i:03d}.gten") for i in range(n)])
    conf = np.stack([load_gten(root / "confidence" / f"{i:03d}.gten") for i in range(n)])
    return Predictions(pts, conf, poses, man)
