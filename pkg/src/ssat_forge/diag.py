"""Feature and loss-landscape diagnostics.

Token analyses take raw arrays: attention records ``(B, heads, n, n)`` and
token sequences ``(n, d)`` or ``(B, n, d)``.  Curvature analyses take a
``loss_fn(theta) -> (loss, grad)`` over a flat float64 parameter vector.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.spatial.distance import pdist

from . import tensor as T
from .checkpoint import atomic_write_bytes
from .layers import AttentionRecord
from .ssat import SSATModel, ssat_step_forward
from .vit import VisionTransformer, cross_entropy, forward

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]
DENSE_HESSIAN_LIMIT = 2000


class DiagnosticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# token analyses


def attention_column_sums(record, per_head: bool = False) -> np.ndarray:
    """Attention received by each token: column sums of every ``n x n`` matrix.

    Returns ``(B, n)`` averaged over heads, or ``(B, heads, n)`` with ``per_head``.
    """
    w = record.weights if isinstance(record, AttentionRecord) else np.asarray(record)
    if w.ndim == 2:
        w = w[None, None]
    elif w.ndim == 3:
        w = w[None]
    if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
        raise DiagnosticsError(f"attention weights must be (B, heads, n, n), got {w.shape}")
    cols = w.sum(axis=-2, dtype=np.float64)
    return cols if per_head else cols.mean(axis=1)


def _token_batch(tokens, drop_class_token: bool) -> np.ndarray:
    x = np.asarray(tokens.data if isinstance(tokens, T.Tensor) else tokens, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DiagnosticsError(f"tokens must be (n, d) or (B, n, d), got {x.shape}")
    if drop_class_token:
        x = x[:, 1:]
    if x.shape[1] < 2:
        raise DiagnosticsError("need at least two tokens")
    return x


def inter_token_distance(tokens, drop_class_token: bool = False) -> float:
    """Mean Euclidean distance over unordered token pairs, averaged over samples."""
    x = _token_batch(tokens, drop_class_token)
    return float(np.mean([pdist(sample).mean() for sample in x]))


def feature_variance(tokens, drop_class_token: bool = False) -> float:
    """Per-channel variance across tokens, averaged over channels and samples."""
    x = _token_batch(tokens, drop_class_token)
    return float(x.var(axis=1).mean())


# ---------------------------------------------------------------------------
# curvature


def _checked(loss_fn: LossFn, theta: np.ndarray) -> np.ndarray:
    loss, grad = loss_fn(theta)
    grad = np.asarray(grad, dtype=np.float64)
    if not math.isfinite(float(loss)) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("loss or gradient is not finite")
    return grad


def fd_step(params_flat: np.ndarray, fd_eps: float) -> float:
    """Step length scaled by the parameters' RMS so large weights get larger steps."""
    rms = float(np.sqrt(np.mean(np.square(params_flat)))) if params_flat.size else 0.0
    return fd_eps * max(1.0, rms)


def hessian_vector_product(loss_fn: LossFn, params_flat, v, fd_eps: float = 1e-4) -> np.ndarray:
    """``H v`` from a central difference of gradients along ``v / |v|``."""
    if not fd_eps > 0:
        raise ValueError("fd_eps must be positive")
    theta = np.asarray(params_flat, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DiagnosticsError(f"v has shape {v.shape}, parameters {theta.shape}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    eps = fd_step(theta, fd_eps)
    direction = v / norm
    g_plus = _checked(loss_fn, theta + eps * direction)
    g_minus = _checked(loss_fn, theta - eps * direction)
    return (g_plus - g_minus) * (norm / (2.0 * eps))


def dense_hessian(
    loss_fn: LossFn,
    params_flat,
    fd_eps: float = 1e-4,
    symmetrize: bool = True,
    limit: int = DENSE_HESSIAN_LIMIT,
) -> np.ndarray:
    """Full Hessian, one finite-difference column per parameter."""
    theta = np.asarray(params_flat, dtype=np.float64)
    if theta.size > limit:
        raise DiagnosticsError(f"dense Hessian refused: {theta.size} parameters exceeds the limit of {limit}")
    eye = np.eye(theta.size)
    h = np.stack([hessian_vector_product(loss_fn, theta, eye[i], fd_eps) for i in range(theta.size)], axis=1)
    return 0.5 * (h + h.T) if symmetrize else h


@dataclass
class SpectrumSummary:
    top: list[float]  # descending
    bottom: list[float]  # ascending
    negative_count: float
    negative_count_exact: bool
    negative_mean_magnitude: float
    iterations: int
    dim: int
    breakdown: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def lanczos_spectrum(
    operator: Callable[[np.ndarray], np.ndarray],
    dim: int,
    k: int = 5,
    iterations: int = 30,
    seed: int = 0,
    tol: float = 1e-10,
) -> SpectrumSummary:
    """Extreme eigenvalues of a symmetric operator by Lanczos with full reorthogonalization.

    Both ends come from one Krylov run.  When the run spans the whole space the
    negative count is exact; otherwise it is the quadrature estimate
    ``dim * sum(tau_j^2 [theta_j < 0])`` with ``tau_j`` the first components of
    the Ritz vectors of the tridiagonal matrix.
    """
    if not 1 <= k <= iterations <= dim:
        raise ValueError(f"need 1 <= k <= iterations <= dim, got k={k}, iterations={iterations}, dim={dim}")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    basis = np.empty((iterations, dim))
    alphas, betas = [], []
    breakdown = False
    for j in range(iterations):
        basis[j] = q
        w = np.asarray(operator(q), dtype=np.float64)
        alpha = float(q @ w)
        alphas.append(alpha)
        # two passes of Gram-Schmidt against the whole basis
        for _ in range(2):
            w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        if j == iterations - 1:
            break
        beta = float(np.linalg.norm(w))
        scale = max(1.0, max(abs(a) for a in alphas))
        if beta <= tol * scale:
            breakdown = True
            break
        betas.append(beta)
        q = w / beta
    m = len(alphas)
    if m == 1:
        theta, vecs = np.array(alphas), np.ones((1, 1))
    else:
        theta, vecs = eigh_tridiagonal(np.array(alphas), np.array(betas[: m - 1]))
    tau2 = vecs[0] ** 2
    scale = max(1.0, float(np.abs(theta).max()))
    negative = theta < -tol * scale
    exact = m == dim
    if exact:
        count = float(negative.sum())
    else:
        count = float(dim * tau2[negative].sum())
    if negative.any():
        weights = tau2[negative] if not exact else np.ones(int(negative.sum()))
        mean_mag = float((weights * np.abs(theta[negative])).sum() / weights.sum())
    else:
        mean_mag = 0.0
    kk = min(k, m)
    return SpectrumSummary(
        top=[float(x) for x in theta[::-1][:kk]],
        bottom=[float(x) for x in theta[:kk]],
        negative_count=count,
        negative_count_exact=exact,
        negative_mean_magnitude=mean_mag,
        iterations=m,
        dim=dim,
        breakdown=breakdown,
    )


# ---------------------------------------------------------------------------
# flat-parameter view of a model


class FlatParameters:
    """Read and write a list of tensors as one float64 vector."""

    def __init__(self, named):
        self.names = [n for n, _ in named]
        self.tensors = [t for _, t in named]
        self.sizes = [t.data.size for t in self.tensors]
        self.offsets = np.cumsum([0] + self.sizes)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def get(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1).astype(np.float64) for t in self.tensors])

    def set(self, flat: np.ndarray) -> None:
        for t, a, b in zip(self.tensors, self.offsets[:-1], self.offsets[1:]):
            t.data = flat[a:b].reshape(t.data.shape).astype(t.data.dtype)

    def gather(self, grads) -> np.ndarray:
        parts = []
        for t in self.tensors:
            g = grads.get(t)
            parts.append(np.zeros(t.data.size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)


def _cast(model, dtype):
    clone = copy.deepcopy(model)
    for _, t in clone.named_parameters():
        t.data = t.data.astype(dtype)
    return clone


def model_loss_fn(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    loss: str = "cls",
    lam: float = 0.1,
    mask_ratio: float = 0.75,
    mask_seed: int = 0,
) -> tuple[LossFn, FlatParameters]:
    """A 64-bit ``loss_fn`` over a private copy of ``model``'s parameters.

    ``loss="cls"`` is the plain classification loss; ``loss="total"`` is the
    joint objective with a fixed mask and needs an :class:`SSATModel`.
    """
    if loss not in ("cls", "total"):
        raise ValueError(f"loss must be 'cls' or 'total', got {loss!r}")
    if loss == "total" and not isinstance(model, SSATModel):
        raise DiagnosticsError("the joint loss needs a model with a decoder")
    clone = _cast(model, np.float64)
    flat = FlatParameters(list(clone.named_parameters()))
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels)
    vit = clone.vit if isinstance(clone, SSATModel) else clone

    def loss_fn(theta: np.ndarray):
        flat.set(theta)
        with T.precision(64), T.fresh_tape() as tape:
            if loss == "cls":
                logits, _ = forward(vit, x)
                value = cross_entropy(logits, y)
            else:
                value = ssat_step_forward(clone, x, y, mask_ratio, lam, mask_seed=mask_seed).total
            grads = T.backward(value, tape)
        return float(value.data), flat.gather(grads)

    return loss_fn, flat


# ---------------------------------------------------------------------------
# report


@dataclass
class DiagnosticsConfig:
    slice_size: int = 64
    batch_size: int = 32
    analyses: tuple[str, ...] = ("attention", "distance", "variance", "spectrum")
    top_k: int = 5
    iterations: int = 20
    seed: int = 0
    fd_eps: float = 1e-4
    loss: str = "cls"

    def __post_init__(self):
        unknown = set(self.analyses) - {"attention", "distance", "variance", "spectrum"}
        if unknown:
            raise DiagnosticsError(f"unknown analyses {sorted(unknown)}")
        if self.slice_size < 1 or self.batch_size < 1:
            raise DiagnosticsError("slice_size and batch_size must be positive")


@dataclass
class AttentionMassProfile:
    layer: int
    received: list[float]  # per token, averaged over heads and samples
    samples: int


@dataclass
class DiagnosticsReport:
    depth: int
    attention: list[AttentionMassProfile] = field(default_factory=list)
    inter_token_distance: list[float] = field(default_factory=list)
    feature_variance: list[float] = field(default_factory=list)
    spectrum: SpectrumSummary | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "attention": [asdict(p) for p in self.attention],
            "inter_token_distance": self.inter_token_distance,
            "feature_variance": self.feature_variance,
            "spectrum": None if self.spectrum is None else self.spectrum.to_dict(),
            "provenance": self.provenance,
        }


def parameter_digest(model) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters(), key=lambda item: item[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def slice_digest(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).astype(np.int64).tobytes())
    return h.hexdigest()


def build_report(model, images: np.ndarray, labels: np.ndarray, config: DiagnosticsConfig | None = None) -> DiagnosticsReport:
    """Run the configured analyses on the first ``slice_size`` samples."""
    config = config or DiagnosticsConfig()
    images, labels = images[: config.slice_size], labels[: config.slice_size]
    if len(images) == 0:
        raise DiagnosticsError("empty dataset slice")
    vit: VisionTransformer = model.vit if isinstance(model, SSATModel) else model
    depth = vit.config.depth
    has_cls = vit.config.use_class_token
    col_sums = [[] for _ in range(depth)]
    dist = [[] for _ in range(depth)]
    var = [[] for _ in range(depth)]
    with T.no_grad():
        for i in range(0, len(images), config.batch_size):
            batch = images[i : i + config.batch_size].astype(T.get_dtype())
            _, out = forward(vit, batch, record="attention" in config.analyses)
            for layer in range(depth):
                if "attention" in config.analyses:
                    col_sums[layer].append(attention_column_sums(out.attention[layer]))
                hidden = out.hidden[layer].data
                if "distance" in config.analyses:
                    dist[layer].append(inter_token_distance(hidden, has_cls) * len(batch))
                if "variance" in config.analyses:
                    var[layer].append(feature_variance(hidden, has_cls) * len(batch))
    n = len(images)
    report = DiagnosticsReport(depth=depth)
    if "attention" in config.analyses:
        report.attention = [
            AttentionMassProfile(layer, np.concatenate(c).mean(axis=0).tolist(), n) for layer, c in enumerate(col_sums)
        ]
    if "distance" in config.analyses:
        report.inter_token_distance = [float(sum(d) / n) for d in dist]
    if "variance" in config.analyses:
        report.feature_variance = [float(sum(v) / n) for v in var]
    if "spectrum" in config.analyses:
        loss_fn, flat = model_loss_fn(model, images, labels, loss=config.loss, mask_seed=config.seed)
        theta = flat.get()
        iterations = min(config.iterations, flat.size)
        report.spectrum = lanczos_spectrum(
            lambda v: hessian_vector_product(loss_fn, theta, v, config.fd_eps),
            flat.size,
            k=min(config.top_k, iterations),
            iterations=iterations,
            seed=config.seed,
        )
    report.provenance = {
        "checkpoint_digest": parameter_digest(model),
        "dataset_digest": slice_digest(images, labels),
        "samples": n,
        "loss": config.loss,
    }
    return report


def _csv_bytes(header: list[str], rows, spec_digest: str | None) -> bytes:
    buf = io.StringIO()
    if spec_digest:
        buf.write(f"# spec_digest={spec_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode()


def write_report(report: DiagnosticsReport, out_dir, spec_digest: str | None = None) -> list[Path]:
    """``report.json`` plus one CSV per analysis; every file carries the spec digest."""
    out = Path(out_dir)
    doc = report.to_dict()
    doc["spec_digest"] = spec_digest
    files = {"report.json": (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()}
    if report.attention:
        rows = [(p.layer, j, repr(v)) for p in report.attention for j, v in enumerate(p.received)]
        files["attention.csv"] = _csv_bytes(["layer", "token", "received"], rows, spec_digest)
    if report.inter_token_distance:
        rows = [(i, repr(v)) for i, v in enumerate(report.inter_token_distance)]
        files["distance.csv"] = _csv_bytes(["layer", "inter_token_distance"], rows, spec_digest)
    if report.feature_variance:
        rows = [(i, repr(v)) for i, v in enumerate(report.feature_variance)]
        files["variance.csv"] = _csv_bytes(["layer", "feature_variance"], rows, spec_digest)
    if report.spectrum is not None:
        s = report.spectrum
        rows = [("top", i, repr(v)) for i, v in enumerate(s.top)] + [("bottom", i, repr(v)) for i, v in enumerate(s.bottom)]
        files["spectrum.csv"] = _csv_bytes(["end", "rank", "eigenvalue"], rows, spec_digest)
    written = []
    for name, data in files.items():
        atomic_write_bytes(out / name, data)
        written.append(out / name)
    return written
