"""Per-sample gradient cache at the meta-initialization, and linearization
quality metrics.

Each cached entry pairs b = -y * h(s, y) with the projected margin gradient
P^T grad h(s, y), both evaluated at theta*. Multi-class and multi-position
samples are reduced to the binary form through the logistic-margin transform,
so their effective sign is +1. The relative residual sum of squares (RRSS)
quantifies how far a true margin at X is from its first-order prediction.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import Network, ParamVector, Sample, stack_samples
from .project import GENERATOR_VERSION, Projector
from .taskgen import TARGET_TASK_ID, Corpus
from .trainer import param_digest

RRSS_DENOM_GUARD = 1e-8

_CHUNK = 256


@dataclass(frozen=True)
class CacheEntry:
    sample_ref: int
    task_id: int
    y_sign: int
    b: float
    g_proj: np.ndarray


@dataclass
class GradientCache:
    """Arrays of (b, projected gradient) for every train sample of every
    task, plus the target validation samples kept separately.

    Contents are immutable once built and safe for concurrent reads; the one
    mutable field is consult_counts, a per-entry instrumentation counter
    bumped by rows_for.
    """

    sample_ref: np.ndarray  # (n,) int64, index into corpus train order
    task_id: np.ndarray  # (n,) int64
    y: np.ndarray  # (n,) float64, effective binary sign
    b: np.ndarray  # (n,) float64
    g_proj: np.ndarray  # (n, d) float64
    val_y: np.ndarray
    val_b: np.ndarray
    val_g_proj: np.ndarray
    p: int
    d: int
    theta_star_digest: str
    projector_seed: int
    projector_mode: str
    consult_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.consult_counts is None:
            self.consult_counts = np.zeros(len(self.task_id), dtype=np.int64)

    @property
    def n_entries(self) -> int:
        return len(self.task_id)

    @property
    def n_val_entries(self) -> int:
        return len(self.val_b)

    def entry(self, i: int) -> CacheEntry:
        return CacheEntry(
            int(self.sample_ref[i]),
            int(self.task_id[i]),
            int(self.y[i]),
            float(self.b[i]),
            self.g_proj[i],
        )

    def rows_for(self, subset, include_target: bool = True) -> np.ndarray:
        """Indices of entries with task_id in subset (plus the target's train
        entries unless disabled). Bumps per-entry consultation counters."""
        wanted = set(int(t) for t in subset)
        if include_target:
            wanted.add(TARGET_TASK_ID)
        mask = np.isin(self.task_id, sorted(wanted))
        idx = np.flatnonzero(mask)
        self.consult_counts[idx] += 1
        return idx

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.sample_ref, self.task_id, self.y, self.b, self.g_proj,
                    self.val_y, self.val_b, self.val_g_proj):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(self.theta_star_digest.encode())
        return h.hexdigest()


def _margins_and_b(net: Network, theta: ParamVector, samples: list[Sample]):
    X, labels = stack_samples(samples)
    h = net.margins(theta, X, labels)
    if net.config.is_binary:
        y = 2.0 * np.array([s.label for s in samples], dtype=np.float64) - 1.0
    else:
        y = np.ones(len(samples))
    return y, -y * h


def build_cache(
    net: Network, theta_star: ParamVector, corpus: Corpus, projector: Projector
) -> GradientCache:
    """Stage-1 cache: one entry per train sample of tasks 1..n and the target,
    plus target-val entries for the linearized evaluator."""
    if projector.p != net.param_count:
        raise ValueError(
            f"projector expects p={projector.p} but the model has {net.param_count} parameters"
        )
    train = corpus.all_train_samples()
    refs = np.arange(len(train), dtype=np.int64)
    tids = np.array([s.task_id for s in train], dtype=np.int64)

    y, b = _margins_and_b(net, theta_star, train)
    g = _project_gradients(net, theta_star, train, projector)

    val = corpus.target.val
    val_y, val_b = _margins_and_b(net, theta_star, val)
    val_g = _project_gradients(net, theta_star, val, projector)

    return GradientCache(
        sample_ref=refs,
        task_id=tids,
        y=y,
        b=b,
        g_proj=g,
        val_y=val_y,
        val_b=val_b,
        val_g_proj=val_g,
        p=net.param_count,
        d=projector.d,
        theta_star_digest=param_digest(theta_star),
        projector_seed=projector.seed,
        projector_mode=projector.mode,
    )


def _project_gradients(net, theta, samples, projector) -> np.ndarray:
    out = np.empty((len(samples), projector.d))
    for lo in range(0, len(samples), _CHUNK):
        chunk = samples[lo : lo + _CHUNK]
        G = np.stack([net.margin_gradient(theta, s) for s in chunk])
        out[lo : lo + len(chunk)] = projector.project_many(G)
    return out


# ---------------------------------------------------------------------------
# Taylor margins and RRSS
# ---------------------------------------------------------------------------


def taylor_margin(entry: CacheEntry, z_d: np.ndarray) -> float:
    """First-order margin at theta* + P z, from a cached entry.

    z_d is the d-space displacement; the inner product g~ . z equals the full
    g . (P z) exactly, which covers every estimator iterate.
    """
    h_star = -entry.b * entry.y_sign
    return float(h_star + entry.g_proj @ np.asarray(z_d, dtype=np.float64))


def taylor_margin_full(
    net: Network, theta_star: ParamVector, x: ParamVector, sample: Sample
) -> float:
    """First-order margin at an arbitrary X, using the full gradient."""
    h_star = net.margin(theta_star, sample)
    g = net.margin_gradient(theta_star, sample)
    return float(h_star + g @ (x - theta_star))


def rrss(net: Network, theta_star: ParamVector, x: ParamVector, sample: Sample) -> float:
    """(h_X - h_* - g^T (X - theta*))^2 / h_X^2, with the full gradient.

    Returns NaN when |h_X| is below the denominator guard; aggregates skip
    such samples.
    """
    h_x = net.margin(x, sample)
    if abs(h_x) < RRSS_DENOM_GUARD:
        return math.nan
    pred = taylor_margin_full(net, theta_star, x, sample)
    return float((h_x - pred) ** 2 / h_x**2)


def _rrss_batch(net, theta_star, x, samples) -> np.ndarray:
    X, labels = stack_samples(samples)
    h_x = net.margins(x, X, labels)
    h_star = net.margins(theta_star, X, labels)
    delta = x - theta_star
    lin = np.array([net.margin_gradient(theta_star, s) @ delta for s in samples])
    small = np.abs(h_x) < RRSS_DENOM_GUARD
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = (h_x - h_star - lin) ** 2 / h_x**2
    vals[small] = np.nan
    return vals


@dataclass(frozen=True)
class RrssRow:
    distance: float
    mean_rrss: float
    std_rrss: float
    n_used: int
    n_flagged: int


def rrss_sweep(
    net: Network,
    theta_star: ParamVector,
    samples: list[Sample],
    distances: list[float],
    n_directions: int,
    seed: int,
    endpoint_params: list[ParamVector] | None = None,
) -> list[RrssRow]:
    """Mean/std RRSS at each relative distance, over displacement directions.

    Directions come first from normalized (endpoint - theta*) vectors when
    fine-tuned endpoints are supplied, then random unit directions fill up to
    n_directions. Every direction is rescaled so that ||X - theta*|| equals
    distance * ||theta*|| exactly.
    """
    if any(dist < 0 for dist in distances):
        raise ValueError("distances must be non-negative")
    rng = np.random.default_rng(seed)
    norm_star = np.linalg.norm(theta_star)

    directions = []
    for endpoint in endpoint_params or []:
        diff = endpoint - theta_star
        nrm = np.linalg.norm(diff)
        if nrm > 0:
            directions.append(diff / nrm)
    while len(directions) < n_directions:
        u = rng.standard_normal(theta_star.shape[0])
        directions.append(u / np.linalg.norm(u))
    directions = directions[:n_directions]

    rows = []
    for dist in distances:
        per_direction = []
        flagged = 0
        used = 0
        for u in directions:
            x = theta_star + dist * norm_star * u
            vals = _rrss_batch(net, theta_star, x, samples)
            ok = vals[np.isfinite(vals)]
            flagged += int(np.size(vals) - ok.size)
            used += ok.size
            if ok.size:
                per_direction.append(ok.mean())
        arr = np.array(per_direction)
        rows.append(
            RrssRow(
                distance=float(dist),
                mean_rrss=float(arr.mean()) if arr.size else math.nan,
                std_rrss=float(arr.std()) if arr.size else math.nan,
                n_used=used,
                n_flagged=flagged,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Cache file: fixed-width records under a versioned header
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"GSCA"
CACHE_VERSION = 1
_HEADER = struct.Struct("<IQIQQqI")
_RECORD_HEAD = struct.Struct("<IHhd")


def save_cache(path, cache: GradientCache) -> None:
    if cache.projector_mode != "gaussian":
        raise ValueError("only gaussian-mode caches are serializable")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(
            _HEADER.pack(
                CACHE_VERSION,
                cache.p,
                cache.d,
                cache.n_entries,
                cache.n_val_entries,
                cache.projector_seed,
                GENERATOR_VERSION,
            )
        )
        f.write(bytes.fromhex(cache.theta_star_digest))
        for ref, tid, y, b, g in zip(
            cache.sample_ref, cache.task_id, cache.y, cache.b, cache.g_proj
        ):
            f.write(_RECORD_HEAD.pack(int(ref), int(tid), int(y), float(b)))
            f.write(np.asarray(g, dtype="<f4").tobytes())
        for y, b, g in zip(cache.val_y, cache.val_b, cache.val_g_proj):
            f.write(_RECORD_HEAD.pack(0, TARGET_TASK_ID, int(y), float(b)))
            f.write(np.asarray(g, dtype="<f4").tobytes())


def load_cache(path) -> GradientCache:
    with open(path, "rb") as f:
        if f.read(4) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a gradient cache file")
        version, p, d, n, n_val, proj_seed, proj_version = _HEADER.unpack(
            f.read(_HEADER.size)
        )
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        if proj_version != GENERATOR_VERSION:
            raise ValueError(f"{path}: projector generator version mismatch")
        theta_digest = f.read(32).hex()

        def read_records(count):
            refs = np.empty(count, dtype=np.int64)
            tids = np.empty(count, dtype=np.int64)
            ys = np.empty(count)
            bs = np.empty(count)
            gs = np.empty((count, d))
            for i in range(count):
                ref, tid, y, b = _RECORD_HEAD.unpack(f.read(_RECORD_HEAD.size))
                g = np.frombuffer(f.read(4 * d), dtype="<f4")
                refs[i], tids[i], ys[i], bs[i] = ref, tid, y, b
                gs[i] = g
            return refs, tids, ys, bs, gs

        refs, tids, ys, bs, gs = read_records(n)
        _, _, vys, vbs, vgs = read_records(n_val)

    return GradientCache(
        sample_ref=refs,
        task_id=tids,
        y=ys,
        b=bs,
        g_proj=gs,
        val_y=vys,
        val_b=vbs,
        val_g_proj=vgs,
        p=int(p),
        d=int(d),
        theta_star_digest=theta_digest,
        projector_seed=int(proj_seed),
        projector_mode="gaussian",
    )
