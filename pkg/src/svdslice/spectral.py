"""Spectral change analysis of fine-tuned weights.

A fine-tuned matrix is projected into the singular basis of its pre-trained
version; the absolute change matrix is split into its diagonal (principal
value scaling) and off-diagonal (principal direction rotation) parts.
Component importance is estimated by zeroing one principal component at a
time and measuring the accuracy drop on prior-task data; importance-weighted
sums of the two parts summarize each run.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProfileWarning, LengthMismatch, ShapeMismatch
from .linalg import as_matrix, svd
from .training import evaluate, forgetting_abs

FULL_DELTA_MAX_K = 1024


@dataclass
class SpectralDelta:
    """|delta Sigma| summarized: its diagonal, the row norms of its
    off-diagonal part, and (for small k) the full k-by-k matrix."""

    diag: np.ndarray
    offdiag_row_norms: np.ndarray
    space: str  # "parameter" | "feature"
    full: np.ndarray = None

    @property
    def k(self):
        return self.diag.shape[0]


@dataclass
class ImportanceProfile:
    """Per-component forgetting from single-component ablation, raw and
    normalized to max 1 (all-zero when nothing forgets)."""

    raw_f: np.ndarray
    p: np.ndarray
    degenerate: bool = False

    @property
    def k(self):
        return self.p.shape[0]


def _delta_from_projection(sigma0, projected, space):
    full = -projected
    idx = np.arange(sigma0.shape[0])
    full[idx, idx] += sigma0
    np.abs(full, out=full)
    diag = full[idx, idx].copy()
    off = full.copy()
    off[idx, idx] = 0.0
    row_norms = np.linalg.norm(off, axis=1)
    keep = full if full.shape[0] <= FULL_DELTA_MAX_K else None
    return SpectralDelta(diag=diag, offdiag_row_norms=row_norms, space=space, full=keep)


def param_space_delta(w0, w_ft, factorization=None):
    """Project w_ft into the singular basis of w0 and take |Sigma0 - proj|."""
    w0 = as_matrix(w0, "w0")
    w_ft = as_matrix(w_ft, "w_ft")
    if w0.shape != w_ft.shape:
        raise ShapeMismatch(f"shapes differ: {w0.shape} vs {w_ft.shape}")
    f0 = factorization if factorization is not None else svd(w0)
    projected = f0.u.T @ w_ft @ f0.vt.T
    return _delta_from_projection(f0.sigma, projected, "parameter")


def feature_space_delta(x0, w0, w_ft):
    """Same decomposition on layer outputs: y0 = x0 @ w0 defines the basis,
    x0 @ w_ft is projected into it."""
    x0 = as_matrix(x0, "x0")
    w0 = as_matrix(w0, "w0")
    w_ft = as_matrix(w_ft, "w_ft")
    if w0.shape != w_ft.shape:
        raise ShapeMismatch(f"shapes differ: {w0.shape} vs {w_ft.shape}")
    if x0.shape[1] != w0.shape[0]:
        raise ShapeMismatch(f"x0 has {x0.shape[1]} columns, w0 expects {w0.shape[0]}")
    y0 = x0 @ w0
    f0 = svd(y0)
    projected = f0.u.T @ (x0 @ w_ft) @ f0.vt.T
    return _delta_from_projection(f0.sigma, projected, "feature")


def component_importance(model0, prior_data, layer):
    """Ablate each principal component of one layer's weight in turn
    (W - sigma_i u_i v_i^T), measure prior-task forgetting, normalize.

    The model is never mutated: ablations are expressed as pre-activation
    overrides, reusing the activations below the target layer.
    """
    w = model0.layer_weight(layer)
    f = svd(w)
    h = model0.layer_input(prior_data.x, layer)
    bias = model0.layers[layer].bias
    z_base = h @ w
    if bias is not None:
        z_base = z_base + bias
    acc_base = evaluate(model0, prior_data)
    hu = h @ f.u  # (N, k): per-component left projections, computed once

    raw = np.zeros(f.k)
    for i in range(f.k):
        z = z_base - f.sigma[i] * np.outer(hu[:, i], f.vt[i])
        logits = model0.finish_forward(layer, z)
        preds = np.argmax(logits, axis=1)
        acc_i = float(np.mean(preds == prior_data.y))
        raw[i] = forgetting_abs(acc_base, acc_i)

    fmax = raw.max()
    if fmax == 0.0:
        warnings.warn(
            "all component ablations left accuracy unchanged; profile is all-zero",
            DegenerateProfileWarning,
            stacklevel=2,
        )
        return ImportanceProfile(raw_f=raw, p=np.zeros_like(raw), degenerate=True)
    return ImportanceProfile(raw_f=raw, p=raw / fmax)


def weighted_summary(delta, profile):
    """Importance-weighted sums of the diagonal and off-diagonal changes."""
    p = profile.p if isinstance(profile, ImportanceProfile) else np.asarray(profile)
    if p.shape[0] != delta.k:
        raise LengthMismatch(f"profile length {p.shape[0]} != delta length {delta.k}")
    return float(p @ delta.diag), float(p @ delta.offdiag_row_norms)


def write_delta_csv(path, delta, p=None):
    """component_index,diag_delta,offdiag_row_norm,p,space rows; the p
    column is left blank when no importance profile applies."""
    pvals = None
    if p is not None:
        pvals = p.p if isinstance(p, ImportanceProfile) else np.asarray(p)
        if pvals.shape[0] != delta.k:
            raise LengthMismatch(f"profile length {pvals.shape[0]} != delta length {delta.k}")
    with open(path, "w") as f:
        f.write("component_index,diag_delta,offdiag_row_norm,p,space\n")
        for i in range(delta.k):
            pcell = "" if pvals is None else repr(float(pvals[i]))
            f.write(
                f"{i},{delta.diag[i]!r},{delta.offdiag_row_norms[i]!r},{pcell},{delta.space}\n"
            )


def write_summary_json(path, delta, profile=None):
    """JSON summary {diag_sum, offdiag_sum, space, k}; sums are unweighted
    (p treated as all ones) when no profile is given."""
    if profile is None:
        diag_sum = float(delta.diag.sum())
        offdiag_sum = float(delta.offdiag_row_norms.sum())
    else:
        diag_sum, offdiag_sum = weighted_summary(delta, profile)
    payload = {
        "diag_sum": diag_sum,
        "offdiag_sum": offdiag_sum,
        "space": delta.space,
        "k": int(delta.k),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return payload
