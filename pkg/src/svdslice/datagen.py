"""Two-task dataset generation with a controllable relatedness knob, plus
an IDX image/label loader for optional real-data runs.

Each task labels Gaussian inputs with a fixed random teacher network
(orthonormal first layer, tanh, linear readout). Task B's teacher shares a
fraction ``overlap`` of its first-layer row space with task A's; the
remaining rows are random directions orthogonal to all of A's. Inputs are
task-specific anisotropic Gaussians concentrated along the task's teacher
subspace (plus isotropic background), so the two tasks occupy related but
distinct input regions, like transfer between two datasets. Readout logits
are centered per class on a fixed calibration sample so classes come out
near-balanced.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, CountMismatch, OutOfRange, TruncatedFile
from .matio import write_matrix
from .rng import stream
from .training import LabeledDataset

TEACHER_GAIN = 1.5
BACKGROUND_STD = 0.3
CALIBRATION_ROWS = 2048

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class TaskPairConfig:
    """Knobs for one prior-task/new-task pair. The teacher hidden width is
    input_dim // 2 so that two fully orthogonal row bases fit."""

    input_dim: int
    classes_a: int
    classes_b: int
    n_train: int
    n_test: int
    overlap: float = 0.5
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 4:
            raise OutOfRange(f"input_dim must be >= 4, got {self.input_dim}")
        for name in ("classes_a", "classes_b", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise OutOfRange(f"{name} must be positive")
        if not 0.0 <= self.overlap <= 1.0:
            raise OutOfRange(f"overlap must lie in [0, 1], got {self.overlap}")
        if self.noise_std < 0.0:
            raise OutOfRange(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def hidden(self):
        return self.input_dim // 2


@dataclass
class Teacher:
    basis: np.ndarray  # (hidden, input_dim), orthonormal rows
    readout: np.ndarray  # (hidden, classes)
    calibration: np.ndarray  # (classes,) per-class logit offsets

    def logits(self, x):
        h = np.tanh(TEACHER_GAIN * (x @ self.basis.T))
        return h @ self.readout - self.calibration

    def labels(self, x, noise=None):
        z = self.logits(x)
        if noise is not None:
            z = z + noise
        return np.argmax(z, axis=1)


def _teacher_bases(cfg):
    """Task B's rows share a fraction ``overlap`` of task A's row space:
    round(overlap*h) rows are A's own, the remainder comes from a random
    basis orthogonal to all of A's rows. A leftover fractional part is
    realized by interpolating one row between the two bases."""
    h = cfg.hidden
    raw = stream(cfg.seed, "teacher_basis").normal(size=(cfg.input_dim, 2 * h))
    q, _ = np.linalg.qr(raw)
    basis_a = np.ascontiguousarray(q[:, :h].T)
    basis_perp = np.ascontiguousarray(q[:, h : 2 * h].T)
    shared_exact = cfg.overlap * h
    n_shared = int(np.floor(shared_exact))
    basis_b = basis_perp.copy()
    basis_b[:n_shared] = basis_a[:n_shared]
    frac = shared_exact - n_shared
    if frac > 0.0 and n_shared < h:
        # One partially aligned row keeps the shared fraction exact; the
        # paired directions are orthonormal, so the mix stays unit norm.
        theta = (1.0 - frac) * np.pi / 2.0
        basis_b[n_shared] = (
            np.cos(theta) * basis_a[n_shared] + np.sin(theta) * basis_perp[n_shared]
        )
    return basis_a, basis_b


def _make_teacher(cfg, basis, n_classes, x_cal):
    # Readout stream keyed only by class count: tasks with equal class
    # counts share it, so overlap = 1 collapses to a single teacher.
    # Unit columns keep per-class logit spread comparable, which together
    # with mean calibration keeps the label histogram near uniform.
    readout = stream(cfg.seed, "teacher_readout", n_classes).normal(
        size=(cfg.hidden, n_classes)
    )
    readout /= np.linalg.norm(readout, axis=0, keepdims=True)
    t = Teacher(basis=basis, readout=readout, calibration=np.zeros(n_classes))
    t.calibration = t.logits(x_cal).mean(axis=0)
    return t


def _task_inputs(cfg, basis, name, split, n):
    # Coordinates along the teacher's own directions plus isotropic
    # background noise; streams are keyed per task and split.
    coords = stream(cfg.seed, "x", name, split).normal(size=(n, basis.shape[0]))
    background = stream(cfg.seed, "x_bg", name, split).normal(
        size=(n, cfg.input_dim)
    )
    return coords @ basis + BACKGROUND_STD * background


def make_task_pair(cfg):
    """Returns ((train_a, test_a), (train_b, test_b)), deterministic in cfg."""
    basis_a, basis_b = _teacher_bases(cfg)
    cal_coords = stream(cfg.seed, "calibration").normal(
        size=(CALIBRATION_ROWS, cfg.hidden)
    )
    cal_bg = stream(cfg.seed, "calibration_bg").normal(
        size=(CALIBRATION_ROWS, cfg.input_dim)
    )

    tasks = []
    for name, basis, n_classes in (("a", basis_a, cfg.classes_a),
                                   ("b", basis_b, cfg.classes_b)):
        x_cal = cal_coords @ basis + BACKGROUND_STD * cal_bg
        teacher = _make_teacher(cfg, basis, n_classes, x_cal)
        splits = []
        for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
            x = _task_inputs(cfg, basis, name, split, n)
            noise = None
            if cfg.noise_std > 0.0:
                noise = cfg.noise_std * stream(cfg.seed, "label_noise", name, split).normal(
                    size=(n, n_classes)
                )
            splits.append(LabeledDataset(x=x, y=teacher.labels(x, noise)))
        tasks.append(tuple(splits))
    return tasks[0], tasks[1]


def save_labeled_dataset(ds, matrix_path, labels_path):
    """Export as an SMX1 matrix plus a one-column labels CSV."""
    write_matrix(matrix_path, ds.x)
    with open(labels_path, "w") as f:
        f.write("label\n")
        for y in ds.y:
            f.write(f"{int(y)}\n")


def _read_be_u32(f, path):
    raw = f.read(4)
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: header cut short")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path, limit=None):
    """Load an IDX image/label pair as a flattened [0, 1] float dataset."""
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x} != {IDX_IMAGE_MAGIC:#010x}")
        n_images = _read_be_u32(f, images_path)
        rows = _read_be_u32(f, images_path)
        cols = _read_be_u32(f, images_path)
        payload = f.read(n_images * rows * cols)
        if len(payload) < n_images * rows * cols:
            raise TruncatedFile(f"{images_path}: expected {n_images * rows * cols} pixels")
    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x} != {IDX_LABEL_MAGIC:#010x}")
        n_labels = _read_be_u32(f, labels_path)
        raw_labels = f.read(n_labels)
        if len(raw_labels) < n_labels:
            raise TruncatedFile(f"{labels_path}: expected {n_labels} labels")
    if n_images != n_labels:
        raise CountMismatch(f"{n_images} images vs {n_labels} labels")
    count = n_images if limit is None else min(limit, n_images)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n_images, rows * cols)
    x = pixels[:count].astype(np.float64) / 255.0
    y = np.frombuffer(raw_labels, dtype=np.uint8)[:count].astype(np.int64)
    return LabeledDataset(x=x, y=y)
