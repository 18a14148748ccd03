"""Deterministic synthetic corpora with controllable task relatedness.

Two generators: a Gaussian multitask family with planted helpful/harmful
source tasks, and a digit-addition family with planted clean/noisy groups.
Plus k-means grouping of cached gradients for data-selection preprocessing.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np

from .model import Sample

TARGET_TASK_ID = 0

DIGIT_CLASSES = 10


@dataclass
class TaskDataset:
    task_id: int
    train: list[Sample]
    val: list[Sample]

    def __post_init__(self):
        if not self.train:
            raise ValueError(f"task {self.task_id} has empty train split")


@dataclass
class Corpus:
    """n source tasks (ids 1..n) plus a distinct target task (id 0)."""

    tasks: list[TaskDataset]
    target: TaskDataset
    meta: dict

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(1, len(self.tasks) + 1)):
            raise ValueError("source task ids must be 1..n in order")
        if self.target.task_id != TARGET_TASK_ID:
            raise ValueError("target task id must be 0")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def task(self, task_id: int) -> TaskDataset:
        if task_id == TARGET_TASK_ID:
            return self.target
        return self.tasks[task_id - 1]

    @property
    def input_dim(self) -> int:
        return int(self.target.train[0].features.shape[0])

    def all_train_samples(self) -> list[Sample]:
        """Train samples of every source task then the target, in id order."""
        out: list[Sample] = []
        for t in self.tasks:
            out.extend(t.train)
        out.extend(self.target.train)
        return out

    def all_val_samples(self) -> list[Sample]:
        out: list[Sample] = []
        for t in self.tasks:
            out.extend(t.val)
        out.extend(self.target.val)
        return out

    def digest(self) -> str:
        return hashlib.sha256(serialize_corpus(self).encode()).hexdigest()


@dataclass
class GroupAssignment:
    """Map from sample index (cache entry order) to group in [0, n_groups)."""

    group_of: np.ndarray
    n_groups: int

    def __post_init__(self):
        self.group_of = np.asarray(self.group_of, dtype=np.int64)
        counts = np.bincount(self.group_of, minlength=self.n_groups)
        if np.any(counts == 0):
            empty = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(f"group {empty} is empty")

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.group_of == group)


# ---------------------------------------------------------------------------
# Gaussian multitask generator
# ---------------------------------------------------------------------------

MEAN_SHIFT = 1.5  # class-mean offset along the task direction


def _rotate(w: np.ndarray, u: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate w toward u by the given angle, snapping near-exact multiples of 90."""
    rad = np.deg2rad(degrees)
    c, s = np.cos(rad), np.sin(rad)
    if abs(c) < 1e-12:
        c = 0.0
    if abs(s) < 1e-12:
        s = 0.0
    if abs(abs(c) - 1.0) < 1e-12:
        c = np.sign(c)
    if abs(abs(s) - 1.0) < 1e-12:
        s = np.sign(s)
    return c * w + s * u


def _gaussian_task(rng, task_id, direction, n_train, n_val, dim, label_noise):
    def draw(n):
        y = rng.integers(0, 2, size=n)
        sign = 2.0 * y - 1.0
        X = sign[:, None] * MEAN_SHIFT * direction[None, :] + rng.standard_normal((n, dim))
        if label_noise > 0:
            flip = rng.random(n) < label_noise
            y = np.where(flip, 1 - y, y)
        return [Sample(X[i], int(y[i]), task_id) for i in range(n)]

    return TaskDataset(task_id, draw(n_train), draw(n_val))


def gen_multitask_gaussian(
    n: int,
    samples_per_task: int,
    dim: int,
    frac_helpful: float,
    rotation_deg: float,
    label_noise: float,
    seed: int,
) -> Corpus:
    """Binary Gaussian corpus with planted helpful and harmful source tasks.

    The target uses a fixed unit direction; helpful tasks reuse it exactly,
    harmful tasks use it rotated by rotation_deg and relabel a label_noise
    fraction of points. Validation splits are samples_per_task // 2 per source
    task (at least 16) and max(40, samples_per_task) for the target.
    """
    if n < 2:
        raise ValueError("need at least 2 source tasks")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not 0.0 <= frac_helpful <= 1.0:
        raise ValueError("frac_helpful must be in [0, 1]")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError("label_noise must be in [0, 1]")

    rng = np.random.default_rng(seed)
    w = np.zeros(dim)
    w[0] = 1.0
    u = np.zeros(dim)
    u[1] = 1.0
    harmful_dir = _rotate(w, u, rotation_deg)

    n_helpful = int(round(frac_helpful * n))
    helpful_ids = list(range(1, n_helpful + 1))
    harmful_ids = list(range(n_helpful + 1, n + 1))

    n_val = max(16, samples_per_task // 2)
    target = _gaussian_task(
        rng, TARGET_TASK_ID, w, samples_per_task, max(40, samples_per_task), dim, 0.0
    )
    tasks = []
    for tid in range(1, n + 1):
        if tid in helpful_ids:
            tasks.append(_gaussian_task(rng, tid, w, samples_per_task, n_val, dim, 0.0))
        else:
            tasks.append(
                _gaussian_task(rng, tid, harmful_dir, samples_per_task, n_val, dim, label_noise)
            )

    meta = {
        "kind": "gaussian",
        "n": n,
        "samples_per_task": samples_per_task,
        "dim": dim,
        "frac_helpful": frac_helpful,
        "rotation_deg": rotation_deg,
        "label_noise": label_noise,
        "seed": seed,
        "helpful_ids": helpful_ids,
        "harmful_ids": harmful_ids,
        "target_direction": w.tolist(),
        "harmful_direction": harmful_dir.tolist(),
    }
    return Corpus(tasks, target, meta)


# ---------------------------------------------------------------------------
# Noisy digit-addition generator
# ---------------------------------------------------------------------------


def addition_output_digits(a_digits: list[int], b_digits: list[int]) -> list[int]:
    """Digit sequence (most significant first) of the sum of two digit strings.

    The operands must sum below 10**len, so the output has the same length.
    Carries are propagated from the least significant position.
    """
    if len(a_digits) != len(b_digits):
        raise ValueError("operands must have equal length")
    out = []
    carry = 0
    for da, db in zip(reversed(a_digits), reversed(b_digits)):
        s = da + db + carry
        out.append(s % 10)
        carry = s // 10
    if carry:
        raise ValueError("sum overflows the digit length")
    return out[::-1]


def encode_addition_features(a_digits, b_digits) -> np.ndarray:
    """One-hot encoding of the two operands: 2 * len * 10 features."""
    digits = len(a_digits)
    x = np.zeros(2 * digits * DIGIT_CLASSES)
    for i, d in enumerate(list(a_digits) + list(b_digits)):
        x[i * DIGIT_CLASSES + int(d)] = 1.0
    return x


def _addition_sample(rng, task_id, digits, noisy):
    while True:
        a = rng.integers(0, 10, size=digits)
        b = rng.integers(0, 10, size=digits)
        if int("".join(map(str, a)) or "0") + int("".join(map(str, b)) or "0") < 10**digits:
            break
    if noisy:
        labels = [int(v) for v in rng.integers(0, 10, size=digits)]
    else:
        labels = addition_output_digits(list(a), list(b))
    return Sample(
        encode_addition_features(a, b), labels[0], task_id, position_labels=tuple(labels)
    )


def gen_noisy_addition(
    n_groups: int,
    n_clean: int,
    digits: int,
    samples_per_group: int,
    seed: int,
    target_samples: int | None = None,
) -> Corpus:
    """Addition corpus: n_clean correctly-labeled groups, the rest with random
    output digits, plus one held-out clean group as the target (id 0).

    target_samples sizes the held-out target train split (default: same as the
    source groups); target tasks are typically much smaller than the sources.
    """
    if digits < 1:
        raise ValueError("digits must be >= 1")
    if n_clean > n_groups:
        raise ValueError("n_clean must not exceed n_groups")
    if target_samples is None:
        target_samples = samples_per_group

    rng = np.random.default_rng(seed)

    def group(task_id, noisy, n_train, n_val=None):
        if n_val is None:
            n_val = max(8, n_train // 4)
        train = [_addition_sample(rng, task_id, digits, noisy) for _ in range(n_train)]
        val = [_addition_sample(rng, task_id, digits, noisy) for _ in range(n_val)]
        return TaskDataset(task_id, train, val)

    # the target's val split anchors every evaluation, so keep it solid even
    # when its train split is small
    target = group(
        TARGET_TASK_ID, noisy=False, n_train=target_samples,
        n_val=max(100, target_samples),
    )
    tasks = [
        group(tid, noisy=(tid > n_clean), n_train=samples_per_group)
        for tid in range(1, n_groups + 1)
    ]
    meta = {
        "kind": "addition",
        "n": n_groups,
        "n_clean": n_clean,
        "digits": digits,
        "samples_per_group": samples_per_group,
        "target_samples": target_samples,
        "seed": seed,
        "clean_ids": list(range(1, n_clean + 1)),
        "noisy_ids": list(range(n_clean + 1, n_groups + 1)),
    }
    return Corpus(tasks, target, meta)


# ---------------------------------------------------------------------------
# Gradient clustering (data-selection preprocessing)
# ---------------------------------------------------------------------------


def _kmeans(X: np.ndarray, k: int, seed: int, n_iter: int = 100) -> np.ndarray:
    """Seeded k-means++ followed by Lloyd iterations; returns labels."""
    n = len(X)
    rng = np.random.default_rng(seed)
    x_sq = np.sum(X * X, axis=1)

    def dist_to(centers):
        # squared distances via the expanded form, O(n k) memory
        return x_sq[:, None] - 2.0 * (X @ centers.T) + np.sum(centers * centers, axis=1)

    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = X[rng.integers(n)]
        else:
            centers[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = dist_to(centers)
        new_labels = dist.argmin(axis=1)
        for j in range(k):
            mask = new_labels == j
            if mask.any():
                centers[j] = X[mask].mean(axis=0)
            else:
                # re-seed an empty cluster on the farthest point
                new_labels[dist.min(axis=1).argmax()] = j
                centers[j] = X[new_labels == j].mean(axis=0)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return labels


def cluster_into_groups(cache, n_groups: int, seed: int) -> GroupAssignment:
    """Group source-task cache entries by k-means on unit-normalized projected
    gradients, i.e. cosine geometry. Deterministic given seed."""
    if cache.n_entries == 0:
        raise ValueError("empty gradient cache")
    if n_groups > cache.n_entries:
        raise ValueError("more groups than cached samples")
    G = cache.g_proj.astype(np.float64, copy=True)
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    G /= norms
    labels = _kmeans(G, n_groups, seed)
    return GroupAssignment(labels, n_groups)


def regroup_corpus(corpus: Corpus, assignment: GroupAssignment) -> Corpus:
    """Rebuild the corpus with one pseudo-task per group; target unchanged.

    assignment indexes the concatenated source-task train samples in corpus
    order (the same order the gradient cache uses).
    """
    source_train = []
    for t in corpus.tasks:
        source_train.extend(t.train)
    if len(assignment.group_of) != len(source_train):
        raise ValueError("assignment length does not match source train samples")

    groups: list[list[Sample]] = [[] for _ in range(assignment.n_groups)]
    for idx, s in enumerate(source_train):
        g = int(assignment.group_of[idx])
        groups[g].append(
            Sample(s.features, s.label, g + 1, position_labels=s.position_labels)
        )
    # each group keeps a small validation slice carved from its own samples
    tasks = []
    for g, samples in enumerate(groups):
        n_val = max(1, len(samples) // 5)
        if len(samples) <= n_val:
            train, val = samples, samples
        else:
            train, val = samples[:-n_val], samples[-n_val:]
        tasks.append(TaskDataset(g + 1, train, val))
    meta = dict(corpus.meta)
    meta["regrouped"] = assignment.n_groups
    return Corpus(tasks, corpus.target, meta)


# ---------------------------------------------------------------------------
# Corpus text format
# ---------------------------------------------------------------------------

CORPUS_FORMAT_VERSION = 1


def _write_split(out, task_id: int, split: str, samples: list[Sample], encoding: str):
    for s in samples:
        if s.position_labels is not None:
            label = ",".join(str(v) for v in s.position_labels)
        else:
            label = str(s.label)
        if encoding == "onehot":
            feats = ",".join(str(i) for i in np.flatnonzero(s.features))
        else:
            feats = ",".join(float(v).hex() for v in s.features)
        out.write(f"{task_id} {split} {label} {feats}\n")


def serialize_corpus(corpus: Corpus) -> str:
    """Line-oriented text form: a versioned header, then one sample per line."""
    encoding = "onehot" if corpus.meta.get("kind") == "addition" else "dense"
    meta_items = " ".join(
        f"{k}={_meta_str(v)}" for k, v in sorted(corpus.meta.items())
    )
    out = io.StringIO()
    out.write(f"gradsel-corpus v{CORPUS_FORMAT_VERSION} encoding={encoding} {meta_items}\n")
    dim = corpus.input_dim
    out.write(f"dim {dim}\n")
    for t in [corpus.target, *corpus.tasks]:
        _write_split(out, t.task_id, "train", t.train, encoding)
        _write_split(out, t.task_id, "val", t.val, encoding)
    return out.getvalue()


def _meta_str(v) -> str:
    if isinstance(v, list):
        return ";".join(str(x) for x in v)
    return str(v)


def save_corpus(path, corpus: Corpus) -> None:
    with open(path, "w") as f:
        f.write(serialize_corpus(corpus))


def load_corpus(path) -> Corpus:
    with open(path) as f:
        header = f.readline().split()
        if not header or header[0] != "gradsel-corpus":
            raise ValueError(f"{path}: not a corpus file")
        if header[1] != f"v{CORPUS_FORMAT_VERSION}":
            raise ValueError(f"{path}: unsupported corpus format {header[1]}")
        fields = dict(kv.split("=", 1) for kv in header[2:])
        encoding = fields.pop("encoding")
        dim_line = f.readline().split()
        dim = int(dim_line[1])
        buckets: dict[tuple[int, str], list[Sample]] = {}
        for line in f:
            tid_s, split, label_s, feats_s = line.split()
            tid = int(tid_s)
            if encoding == "onehot":
                x = np.zeros(dim)
                if feats_s:
                    x[[int(i) for i in feats_s.split(",")]] = 1.0
            else:
                x = np.array([float.fromhex(v) for v in feats_s.split(",")])
            if "," in label_s:
                pos = tuple(int(v) for v in label_s.split(","))
                sample = Sample(x, pos[0], tid, position_labels=pos)
            else:
                sample = Sample(x, int(label_s), tid)
            buckets.setdefault((tid, split), []).append(sample)

    meta = _parse_meta(fields)
    ids = sorted({tid for tid, _ in buckets} - {TARGET_TASK_ID})
    tasks = [
        TaskDataset(tid, buckets[(tid, "train")], buckets.get((tid, "val"), []))
        for tid in ids
    ]
    target = TaskDataset(
        TARGET_TASK_ID, buckets[(TARGET_TASK_ID, "train")], buckets.get((TARGET_TASK_ID, "val"), [])
    )
    return Corpus(tasks, target, meta)


def _parse_meta(fields: dict[str, str]) -> dict:
    meta: dict = {}
    for k, v in fields.items():
        if k in ("kind",):
            meta[k] = v
        elif k.endswith("_ids"):
            meta[k] = [int(x) for x in v.split(";")] if v else []
        elif k.endswith("_direction"):
            meta[k] = [float(x) for x in v.split(";")] if v else []
        else:
            try:
                meta[k] = int(v)
            except ValueError:
                try:
                    meta[k] = float(v)
                except ValueError:
                    meta[k] = v
    return meta
