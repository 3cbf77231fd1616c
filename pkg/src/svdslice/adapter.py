"""Sliced-SVD low-rank adapters.

A weight matrix W = U diag(sigma) Vt is split at a component window
[s, s+r): the window becomes the trainable factor pair

    a = U[:, s:s+r] * sqrt(sigma[s:s+r])      (m, r)
    b = sqrt(sigma[s:s+r]) * Vt[s:s+r, :]     (r, n)

and everything outside the window stays in the frozen residual
w_p = W - U[:, s:s+r] diag(sigma[s:s+r]) Vt[s:s+r, :]. The window s = 0
is the PiSSA initialization and s = k - r the MiLoRA one; intermediate
windows are the general case. Factors are stored compacted (r columns),
which is product-identical to zero-padded k-wide slices.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, SliceOutOfRange, ZeroComponentWarning
from .linalg import as_matrix, svd
from .matio import read_matrix, write_matrix


@dataclass(frozen=True)
class SliceSpec:
    """Component window [start, start+rank) plus the LoRA-style scaling
    numerator alpha (default alpha = rank, i.e. scale 1)."""

    start: int
    rank: int
    alpha: float = None

    def __post_init__(self):
        if self.start < 0:
            raise SliceOutOfRange(f"start must be >= 0, got {self.start}")
        if self.rank < 1:
            raise SliceOutOfRange(f"rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.rank))
        if self.alpha <= 0:
            raise SliceOutOfRange(f"alpha must be positive, got {self.alpha}")


@dataclass
class AdapterState:
    """Frozen residual w_p plus the trainable factor pair (a, b)."""

    w_p: np.ndarray
    a: np.ndarray
    b: np.ndarray
    spec: SliceSpec
    scale: float = field(init=False)

    def __post_init__(self):
        self.scale = self.spec.alpha / self.spec.rank

    @property
    def shape(self):
        return self.w_p.shape


def init_slice_adapter(w, spec, factorization=None):
    """Build an AdapterState from the window ``spec`` of ``w``.

    ``factorization`` may carry a precomputed svd(w) to share across
    windows of the same matrix.
    """
    w = as_matrix(w, "w")
    f = factorization if factorization is not None else svd(w)
    k = f.k
    s, r = spec.start, spec.rank
    if s + r > k:
        raise SliceOutOfRange(
            f"window [{s}, {s + r}) exceeds k={k} for shape {w.shape}"
        )
    sig = f.sigma[s : s + r]
    if np.any(sig == 0.0):
        warnings.warn(
            "slice contains zero singular values; those factor columns start at zero",
            ZeroComponentWarning,
            stacklevel=2,
        )
    root = np.sqrt(sig)
    a = f.u[:, s : s + r] * root[None, :]
    b = root[:, None] * f.vt[s : s + r, :]
    w_p = w - f.u[:, s : s + r] @ (sig[:, None] * f.vt[s : s + r, :])
    return AdapterState(w_p=w_p, a=a, b=b, spec=spec)


def pissa_init(w, rank, alpha=None, factorization=None):
    """Top-of-spectrum window: identical to init_slice_adapter at s = 0."""
    return init_slice_adapter(w, SliceSpec(0, rank, alpha), factorization)


def milora_init(w, rank, alpha=None, factorization=None):
    """Bottom-of-spectrum window: identical to init_slice_adapter at s = k - r."""
    w = as_matrix(w, "w")
    k = min(w.shape)
    return init_slice_adapter(w, SliceSpec(k - rank, rank, alpha), factorization)


def adapter_forward(x, st):
    """x @ (w_p + scale * a @ b), computed without materializing the update."""
    x = as_matrix(x, "x")
    if x.shape[1] != st.w_p.shape[0]:
        raise ShapeMismatch(
            f"x has {x.shape[1]} columns, adapter expects {st.w_p.shape[0]}"
        )
    return x @ st.w_p + st.scale * ((x @ st.a) @ st.b)


def merge(st):
    """Effective dense weight w_p + scale * a @ b."""
    return st.w_p + st.scale * (st.a @ st.b)


def save_adapter(st, out_dir):
    """Write the checkpoint layout: manifest.json + w_p.smx, a.smx, b.smx."""
    os.makedirs(out_dir, exist_ok=True)
    m, n = st.w_p.shape
    manifest = {
        "m": m,
        "n": n,
        "s": st.spec.start,
        "r": st.spec.rank,
        "alpha": st.spec.alpha,
        "format": "SMX1",
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    write_matrix(os.path.join(out_dir, "w_p.smx"), st.w_p)
    write_matrix(os.path.join(out_dir, "a.smx"), st.a)
    write_matrix(os.path.join(out_dir, "b.smx"), st.b)


def load_adapter(in_dir):
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    spec = SliceSpec(manifest["s"], manifest["r"], manifest["alpha"])
    return AdapterState(
        w_p=read_matrix(os.path.join(in_dir, "w_p.smx")),
        a=read_matrix(os.path.join(in_dir, "a.smx")),
        b=read_matrix(os.path.join(in_dir, "b.smx")),
        spec=spec,
    )
