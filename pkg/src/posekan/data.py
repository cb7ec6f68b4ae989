"""Pose datasets: file formats, 2D normalization and a synthetic lifting task.

Text format, one record per line (``#`` starts a comment)::

    meta target_scale=1000 image_w=1000 image_h=1000        (optional)
    sample <id> action=<str> [subject=<str>] | x2d: v1 ... v2J | y3d: w1 ... w3J

Binary format (little-endian)::

    b"PKDS"  u32 version(=1)  u32 N  u32 J
    N x (2J float64 inputs, then 3J float64 targets)

Joint 0 is the root; 3D targets are root-centred on load.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    BadImageDimsError,
    JointCountMismatchError,
    NonFiniteValueError,
    ParseError,
)
from .graph import load_skeleton

ROOT = 0
DEFAULT_TARGET_SCALE = 1000.0  # models regress metres, metrics report mm
BINARY_MAGIC = b"PKDS"
BINARY_VERSION = 1


@dataclass(frozen=True)
class PoseSample:
    input_2d: np.ndarray
    target_3d: np.ndarray | None
    action_label: str | None = None
    subject_id: str | None = None
    sample_id: str | None = None


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, J, 2)
    targets: np.ndarray | None  # (N, J, 3), millimetres
    skeleton: object
    ids: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    subjects: list = field(default_factory=list)
    normalization_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        self.ids = list(self.ids) or [str(i) for i in range(n)]
        self.actions = list(self.actions) or [None] * n
        self.subjects = list(self.subjects) or [None] * n
        self.normalization_meta.setdefault("target_scale", DEFAULT_TARGET_SCALE)

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i):
        return PoseSample(
            self.inputs[i],
            None if self.targets is None else self.targets[i],
            self.actions[i],
            self.subjects[i],
            self.ids[i],
        )

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    @property
    def joint_count(self):
        return self.inputs.shape[1]

    @property
    def target_scale(self):
        return float(self.normalization_meta["target_scale"])

    @property
    def has_actions(self):
        return any(a is not None for a in self.actions)


def root_center(targets):
    return targets - targets[:, ROOT : ROOT + 1, :]


# -- 2D normalization ---------------------------------------------------------

def normalize_2d(raw, image_w, image_h):
    """Pixels to ``[-1, 1]`` along x, sharing the width as divisor for y so
    the aspect ratio is preserved."""
    if not (image_w > 0 and image_h > 0):
        raise BadImageDimsError(f"image dims must be positive, got {image_w}x{image_h}")
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    out[..., 0] = (2.0 * raw[..., 0] - image_w) / image_w
    out[..., 1] = (2.0 * raw[..., 1] - image_h) / image_w
    return out


def denormalize_2d(norm, image_w, image_h):
    if not (image_w > 0 and image_h > 0):
        raise BadImageDimsError(f"image dims must be positive, got {image_w}x{image_h}")
    norm = np.asarray(norm, dtype=np.float64)
    out = np.empty_like(norm)
    out[..., 0] = (norm[..., 0] * image_w + image_w) / 2.0
    out[..., 1] = (norm[..., 1] * image_w + image_h) / 2.0
    return out


# -- file I/O -------------------------------------------------------------------

def _floats(text, record, what):
    try:
        vals = [float(v) for v in text.split()]
    except ValueError:
        raise ParseError(f"non-numeric value in {what}", record=record) from None
    return vals


def _parse_record(line, record, lineno):
    head, *sections = [part.strip() for part in line.split("|")]
    tokens = head.split()
    if len(tokens) < 2 or tokens[0] != "sample":
        raise ParseError("expected 'sample <id> ...'", record=record, line=lineno)
    rec = {"id": tokens[1], "action": None, "subject": None, "x2d": None, "y3d": None}
    for tok in tokens[2:]:
        key, sep, value = tok.partition("=")
        if not sep or key not in ("action", "subject"):
            raise ParseError(f"unexpected token {tok!r}", record=record, line=lineno)
        rec[key] = value
    for sec in sections:
        key, sep, body = sec.partition(":")
        key = key.strip()
        if not sep or key not in ("x2d", "y3d"):
            raise ParseError(f"unexpected section {sec[:20]!r}", record=record, line=lineno)
        rec[key] = _floats(body, record, key)
    if rec["x2d"] is None:
        raise ParseError("missing x2d section", record=record, line=lineno)
    return rec


def _parse_text(text, source):
    meta = {}
    recs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("meta"):
            for tok in line.split()[1:]:
                key, sep, value = tok.partition("=")
                try:
                    meta[key] = float(value)
                except ValueError:
                    raise ParseError(f"{source}: bad meta entry {tok!r}", line=lineno) from None
            continue
        recs.append(_parse_record(line, len(recs), lineno))
    return meta, recs


def _read_binary(blob, source):
    head = struct.calcsize("<4sIII")
    if len(blob) < head:
        raise ParseError(f"{source}: truncated header")
    magic, version, n, J = struct.unpack_from("<4sIII", blob)
    if version != BINARY_VERSION:
        raise ParseError(f"{source}: unsupported version {version}")
    width = 5 * J
    need = head + 8 * n * width
    if len(blob) != need:
        raise ParseError(f"{source}: expected {need} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f8", offset=head).reshape(n, width).astype(np.float64)
    return data[:, : 2 * J].reshape(n, J, 2), data[:, 2 * J :].reshape(n, J, 3)


def load_dataset(path, skeleton=None):
    """Read a text or binary dataset file (format auto-detected)."""
    path = os.fspath(path)
    skeleton = skeleton if skeleton is not None else load_skeleton()
    J = skeleton.joint_count
    with open(path, "rb") as fh:
        blob = fh.read()
    meta = {}
    ids, actions, subjects = [], [], []
    if blob[:4] == BINARY_MAGIC:
        inputs, targets = _read_binary(blob, path)
        if inputs.shape[1] != J:
            raise JointCountMismatchError(f"{path}: file has J={inputs.shape[1]}, skeleton J={J}")
    else:
        meta, recs = _parse_text(blob.decode("utf-8"), path)
        has_gt = [r["y3d"] is not None for r in recs]
        if any(has_gt) and not all(has_gt):
            bad = has_gt.index(False)
            raise ParseError("y3d present in some records but not others", record=bad)
        inputs = np.zeros((len(recs), J, 2))
        targets = np.zeros((len(recs), J, 3)) if recs and all(has_gt) else None
        for i, r in enumerate(recs):
            nx = len(r["x2d"])
            if nx % 2:
                raise ParseError(f"x2d has odd length {nx}", record=i)
            if r["y3d"] is not None and len(r["y3d"]) != 3 * (nx // 2):
                raise ParseError(f"x2d/y3d lengths {nx}/{len(r['y3d'])} disagree", record=i)
            if nx // 2 != J:
                raise JointCountMismatchError(f"record {i}: J={nx // 2}, skeleton J={J}")
            inputs[i] = np.reshape(r["x2d"], (J, 2))
            if targets is not None:
                targets[i] = np.reshape(r["y3d"], (J, 3))
            ids.append(r["id"])
            actions.append(r["action"])
            subjects.append(r["subject"])
    for name, arr in (("inputs", inputs), ("targets", targets)):
        if arr is not None and not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr).reshape(len(arr), -1).all(axis=1))[0])
            raise NonFiniteValueError(f"{path}: non-finite {name} in record {bad}")
    if targets is not None:
        targets = root_center(targets)
    return Dataset(inputs, targets, skeleton, ids, actions, subjects, meta)


def save_dataset(dataset, path, binary=False):
    path = os.fspath(path)
    if binary:
        if dataset.targets is None:
            raise ValueError("binary format requires 3D targets")
        n, J = len(dataset), dataset.joint_count
        flat = np.concatenate(
            [dataset.inputs.reshape(n, -1), dataset.targets.reshape(n, -1)], axis=1
        )
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIII", BINARY_MAGIC, BINARY_VERSION, n, J))
            fh.write(flat.astype("<f8").tobytes())
        return
    lines = []
    if dataset.normalization_meta:
        lines.append(
            "meta " + " ".join(f"{k}={v!r}" for k, v in dataset.normalization_meta.items())
        )
    for i in range(len(dataset)):
        head = f"sample {dataset.ids[i]}"
        if dataset.actions[i] is not None:
            head += f" action={dataset.actions[i]}"
        if dataset.subjects[i] is not None:
            head += f" subject={dataset.subjects[i]}"
        parts = [head, "x2d: " + " ".join(repr(float(v)) for v in dataset.inputs[i].ravel())]
        if dataset.targets is not None:
            parts.append("y3d: " + " ".join(repr(float(v)) for v in dataset.targets[i].ravel()))
        lines.append(" | ".join(parts))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- synthetic task -----------------------------------------------------------

# Pinhole camera: x right, y down, z forward (mm / px).
CAMERA = {
    "focal": 1000.0,
    "image_w": 1000.0,
    "image_h": 1000.0,
    "root_position": (0.0, 0.0, 4500.0),
}

# Bone offsets from parent in the rest pose (mm, y down) for h36m16.
_H36M_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14]
_H36M_OFFSETS = np.array([
    [0, 0, 0],
    [-130, 0, 0], [0, 450, 0], [0, 440, 0],
    [130, 0, 0], [0, 450, 0], [0, 440, 0],
    [0, -230, 0], [0, -250, 0], [0, -200, 0],
    [160, 20, 0], [0, 280, 0], [0, 250, 0],
    [-160, 20, 0], [0, 280, 0], [0, 250, 0],
], dtype=np.float64)
# max local rotation per joint (degrees)
_H36M_RANGE = np.array([0, 15, 60, 60, 15, 60, 60, 20, 20, 30, 15, 80, 80, 15, 80, 80], float)
_ACTIONS = ("walk", "sit", "reach", "bend")


def project(points_cam, camera=CAMERA):
    """Perspective projection of camera-frame points to pixels."""
    f = camera["focal"]
    uv = f * points_cam[..., :2] / points_cam[..., 2:3]
    return uv + np.array([camera["image_w"], camera["image_h"]]) / 2.0


def reproject(target_3d, camera=CAMERA):
    """Normalized 2D keypoints of a root-centred pose placed at the camera's
    fixed root position."""
    pix = project(np.asarray(target_3d) + np.array(camera["root_position"]), camera)
    return normalize_2d(pix, camera["image_w"], camera["image_h"])


def _random_pose(rng):
    """Forward kinematics with depth-unambiguous joint limits.

    Symmetric limits would let mirrored depth configurations project to the
    same 2D pose. Here the body yaw and every joint's swing about its local x
    axis are one-sided (limbs only swing toward the camera), while the bend
    about the local z axis stays in the image plane, so the 2D pose
    determines the 3D pose.
    """
    J = len(_H36M_PARENTS)
    frames = [None] * J
    pos = np.zeros((J, 3))
    frames[0] = Rotation.from_rotvec([0.0, rng.uniform(0.0, math.pi / 3), 0.0])
    for j in range(1, J):
        limit = math.radians(_H36M_RANGE[j])
        bend = Rotation.from_rotvec([0.0, 0.0, rng.uniform(-limit, limit)])
        swing = Rotation.from_rotvec([rng.uniform(0.0, limit), 0.0, 0.0])
        parent = _H36M_PARENTS[j]
        frames[j] = frames[parent] * bend * swing
        pos[j] = pos[parent] + frames[j].apply(_H36M_OFFSETS[j])
    return pos


def make_synthetic_task(J=16, n_samples=200, seed=0, noise_px=0.0):
    """Random bone-length-consistent poses of the shipped 16-joint skeleton,
    seen by the fixed camera in :data:`CAMERA`."""
    if J != len(_H36M_PARENTS):
        raise ValueError(f"no shipped skeleton with J={J}; only J=16 is available")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    skeleton = load_skeleton()
    rng = np.random.default_rng(seed)
    targets = np.stack([_random_pose(rng) for _ in range(n_samples)])
    targets = root_center(targets)
    inputs = reproject(targets)
    if noise_px > 0.0:
        inputs = inputs + rng.normal(0.0, 2.0 * noise_px / CAMERA["image_w"], inputs.shape)
    actions = [_ACTIONS[i % len(_ACTIONS)] for i in range(n_samples)]
    meta = {
        "target_scale": DEFAULT_TARGET_SCALE,
        "image_w": CAMERA["image_w"],
        "image_h": CAMERA["image_h"],
    }
    ids = [f"synth{i:05d}" for i in range(n_samples)]
    return Dataset(inputs, targets, skeleton, ids, actions, ["synth"] * n_samples, meta)
