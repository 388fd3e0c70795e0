"""Cross-validation splits, augmentation and the slice-sampled training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import diffops as ops
from .errors import DualCadError, InputError, NumericError, ParameterError
from .evaluation import binarize, evaluate_heatmap
from .unet import build_unet, get_config, infer_volume, slab, slot_stack


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    learning_rate: float = 2e-4
    batch_size: int = 4
    seed: int = 0
    base_features: int = 8
    depth: int = 4
    foreground_prior: float = 0.01  # initial foreground probability of the head
    folds: int = 5
    val_fraction: float = 0.25
    validate: bool = True  # record validation loss each epoch; never used for stopping
    negatives_per_positive: float = 1.0
    augment: bool = True
    mirror_prob: float = 0.5
    contrast_range: tuple = (0.75, 1.25)
    noise_sd_max: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "contrast_range", tuple(float(v) for v in self.contrast_range))
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ParameterError(f"epochs must be a positive integer, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ParameterError(f"batch size must be a positive integer, got {self.batch_size}")
        if self.folds < 2:
            raise ParameterError(f"need at least 2 folds, got {self.folds}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ParameterError(f"mirror_prob must lie in [0, 1], got {self.mirror_prob}")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise ParameterError(f"contrast range must satisfy 0 < low <= high, got {self.contrast_range}")
        if self.noise_sd_max < 0 or self.negatives_per_positive < 0:
            raise ParameterError("noise_sd_max and negatives_per_positive must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def desk(cls, **overrides):
        return cls(**{"epochs": 20, **overrides})

    def to_dict(self):
        d = asdict(self)
        d["contrast_range"] = list(self.contrast_range)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# -- folds -------------------------------------------------------------------


@dataclass
class FoldSplit:
    assignments: dict  # case id -> fold index
    patients: dict  # case id -> patient id
    k: int
    seed: int = 0
    val_fraction: float = 0.25

    def test(self, i):
        return [c for c, f in self.assignments.items() if f == i]

    def _inner(self, i):
        pool = [c for c, f in self.assignments.items() if f != i]
        by_patient = {}
        for c in pool:
            by_patient.setdefault(self.patients[c], []).append(c)
        order = sorted(by_patient)
        rng = np.random.default_rng([self.seed, i, 1])
        order = [order[j] for j in rng.permutation(len(order))]
        target = round(self.val_fraction * len(pool))
        val = []
        for p in order[:-1]:  # at least one patient stays in training
            if len(val) >= target:
                break
            val.extend(by_patient[p])
        val_set = set(val)
        return [c for c in pool if c not in val_set], [c for c in pool if c in val_set]

    def train(self, i):
        return self._inner(i)[0]

    def val(self, i):
        return self._inner(i)[1]

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "val_fraction": self.val_fraction, "assignments": self.assignments, "patients": self.patients}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["assignments"]), dict(d["patients"]), d["k"], d.get("seed", 0), d.get("val_fraction", 0.25))


def _ids(cases):
    out = []
    for c in cases:
        if isinstance(c, tuple):
            out.append((str(c[0]), str(c[1])))
        else:
            out.append((c.case_id, c.patient_id))
    if len({c for c, _ in out}) != len(out):
        raise InputError("case ids must be unique")
    return out


def make_folds(cases, k=5, seed=0, val_fraction=0.25):
    """Patient-grouped k-fold assignment, balanced by case count.

    Patients are shuffled with ``seed``, then placed largest first into the
    currently smallest fold.
    """
    ids = _ids(cases)
    by_patient = {}
    for c, p in ids:
        by_patient.setdefault(p, []).append(c)
    if len(by_patient) < k:
        raise InputError(f"{len(by_patient)} patients cannot fill {k} folds")
    names = sorted(by_patient)
    rng = np.random.default_rng([seed, 0])
    names = [names[j] for j in rng.permutation(len(names))]
    names.sort(key=lambda p: -len(by_patient[p]))  # stable: shuffled order within equal sizes
    sizes = [0] * k
    assignments = {}
    for p in names:
        f = int(np.argmin(sizes))
        for c in by_patient[p]:
            assignments[c] = f
        sizes[f] += len(by_patient[p])
    ordered = {c: assignments[c] for c, _ in ids}
    return FoldSplit(ordered, {c: p for c, p in ids}, k, seed, val_fraction)


# -- augmentation ---------------------------------------------------------------


def augment(x, mask, rng, tc=None, slab_size=3):
    """Random mirroring, contrast and noise for one sample.

    ``x`` is (channels, H, W) with ``slab_size`` consecutive channels per
    slot; ``mask`` is (H, W). The z-mirror reverses the slice order inside
    every slot and leaves the centre-slice mask untouched.
    """
    tc = tc or TrainConfig()
    c, h, w = x.shape
    if c % slab_size:
        raise ParameterError(f"{c} channels do not split into slabs of {slab_size}")
    flips = [rng.random() < tc.mirror_prob for _ in range(3)]
    factor = rng.uniform(*tc.contrast_range)
    sd = rng.uniform(0.0, tc.noise_sd_max)
    out, m = x, mask
    if flips[0]:
        out, m = out[:, ::-1, :], m[::-1, :]
    if flips[1]:
        out, m = out[:, :, ::-1], m[:, ::-1]
    if flips[2]:
        out = out.reshape(c // slab_size, slab_size, h, w)[:, ::-1].reshape(c, h, w)
    if factor != 1.0:
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = mean + factor * (out - mean)
    if sd > 0:
        out = out + rng.normal(0.0, sd, size=out.shape)
    return np.ascontiguousarray(out, dtype=x.dtype), np.ascontiguousarray(m)


# -- training -------------------------------------------------------------------


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, seconds
    sampling_log: list = field(default_factory=list)  # (epoch, case id, z)
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    @property
    def train_loss(self):
        return [e["train_loss"] for e in self.epochs]

    @property
    def val_loss(self):
        return [e["val_loss"] for e in self.epochs]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "seconds"], lineterminator="\n")
            w.writeheader()
            for e in self.epochs:
                w.writerow({k: ("" if e[k] is None else e[k]) for k in w.fieldnames})


class _Prepared:
    """Z-scored slot stacks and masks of one case, with its positive slices."""

    def __init__(self, case, config, dtype):
        if config.needs_prediag and not case.aligned:
            raise InputError(f"case {case.case_id}: arm {config.name!r} needs an aligned pre-diagnosis scan")
        if case.mask is None:
            raise InputError(f"case {case.case_id} has no ground-truth mask")
        self.case_id = case.case_id
        self.stack = slot_stack(case, config, dtype)
        self.mask = np.asarray(case.mask.data, dtype=np.uint8)
        self.positive = [int(z) for z in np.flatnonzero(self.mask.reshape(-1, self.mask.shape[2]).any(axis=0))]
        self.positive_set = set(self.positive)
        self.negative = [z for z in range(self.mask.shape[2]) if z not in self.positive_set]


def _interleave(pos, neg, rng):
    """Shuffle both groups and spread them evenly, so every mini-batch carries
    foreground whenever the epoch has any (a foreground-free batch pins the
    batch soft Dice at 1 with no gradient)."""
    keys = [(i + rng.random()) / len(pos) for i in range(len(pos))]
    keys += [(j + rng.random()) / len(neg) for j in range(len(neg))]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[j] for j in rng.permutation(len(neg))]
    merged = pos + neg
    return [merged[k] for k in np.argsort(keys, kind="stable")]


def _draw_slices(prep, ratio, rng):
    k = min(len(prep.negative), int(round(ratio * len(prep.positive))))
    neg = sorted(int(z) for z in rng.choice(prep.negative, size=k, replace=False)) if k else []
    return prep.positive + neg


def _batch(preps, samples, half_width, dtype, tc=None, seeds=None):
    xs, ms = [], []
    for j, (cid, z) in enumerate(samples):
        p = preps[cid]
        x, m = slab(p.stack, z, half_width), p.mask[:, :, z]
        if tc is not None and tc.augment:
            x, m = augment(x, m, np.random.default_rng(seeds[j]), tc, 2 * half_width + 1)
        xs.append(x)
        ms.append(m)
    return np.stack(xs).astype(dtype, copy=False), np.stack(ms)


def _val_loss(net, preps, val_samples, half_width, dtype, batch_size):
    total, n = 0.0, 0
    for start in range(0, len(val_samples), batch_size):
        chunk = val_samples[start : start + batch_size]
        x, m = _batch(preps, chunk, half_width, dtype)
        loss = ops.combined_loss(net.forward(x), m)[0]
        total += loss * len(chunk)
        n += len(chunk)
    return total / n if n else None


def train(cases, config, tc=None, fold=None, fold_index=None, progress=None):
    """Train one network on the training part of ``fold`` (all cases if no fold).

    Each epoch visits every ground-truth slice of every training case plus an
    equal number of random lesion-free slices, in shuffled mini-batches.
    Returns the final-epoch network and its history.
    """
    tc = tc or TrainConfig()
    config = get_config(config)
    by_id = {c.case_id: c for c in cases}
    if fold is not None:
        if fold_index is None or not 0 <= fold_index < fold.k:
            raise ParameterError(f"fold_index must lie in 0..{fold.k - 1}, got {fold_index}")
        train_ids, val_ids = fold.train(fold_index), fold.val(fold_index)
        test_ids = set(fold.test(fold_index))
        missing = [c for c in train_ids + val_ids if c not in by_id]
        if missing:
            raise InputError(f"fold references unknown cases {missing[:3]}")
    else:
        train_ids, val_ids, test_ids = list(by_id), [], set()
    if not train_ids:
        raise InputError("no training cases")
    dtype = np.dtype(tc.dtype)
    preps = {cid: _Prepared(by_id[cid], config, dtype) for cid in train_ids + (val_ids if tc.validate else [])}
    net = build_unet(config, tc.base_features, tc.depth, tc.seed, dtype, tc.foreground_prior)
    state = ops.AdamState(lr=tc.learning_rate)
    hist = TrainingHistory(train_ids=list(train_ids), val_ids=list(val_ids))
    vrng = np.random.default_rng([tc.seed, 2])
    val_samples = [(cid, z) for cid in val_ids if tc.validate for z in _draw_slices(preps[cid], tc.negatives_per_positive, vrng)]
    hw = config.half_width
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([tc.seed, 1, epoch])
        samples = [(cid, z) for cid in train_ids for z in _draw_slices(preps[cid], tc.negatives_per_positive, rng)]
        pos = [s for s in samples if s[1] in preps[s[0]].positive_set]
        samples = _interleave(pos, [s for s in samples if s[1] not in preps[s[0]].positive_set], rng)
        leaked = {cid for cid, _ in samples + val_samples} & test_ids
        if leaked:
            raise DualCadError(f"test-fold cases {sorted(leaked)} reached training")
        hist.sampling_log.extend((epoch, cid, z) for cid, z in samples)
        total = 0.0
        for b, start in enumerate(range(0, len(samples), tc.batch_size)):
            chunk = samples[start : start + tc.batch_size]
            seeds = [[tc.seed, 3, epoch, start + j] for j in range(len(chunk))]
            x, m = _batch(preps, chunk, hw, dtype, tc, seeds)
            tape = []
            logits = net.forward(x, tape)
            loss, _, _, grad, _ = ops.combined_loss(logits, m)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            grads, _ = net.backward(grad, tape)
            try:
                net.params, state = ops.adam_step(net.params, grads, state)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            total += loss * len(chunk)
        train_loss = total / len(samples) if samples else 0.0
        val_loss = _val_loss(net, preps, val_samples, hw, dtype, tc.batch_size) if val_samples else None
        hist.epochs.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss, "seconds": time.perf_counter() - t0})
        if progress:
            progress(hist.epochs[-1])
    return net, hist


class LesionDetector(BaseEstimator):
    """Estimator wrapper: ``fit`` on cases, ``predict_proba`` gives heat maps."""

    def __init__(self, arm="dual_ce", epochs=20, learning_rate=2e-4, batch_size=4, base_features=8, depth=4, seed=0, augment=True, threshold=0.5, dilation_radius=6, connectivity=26):
        self.arm = arm
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.base_features = base_features
        self.depth = depth
        self.seed = seed
        self.augment = augment
        self.threshold = threshold
        self.dilation_radius = dilation_radius
        self.connectivity = connectivity

    def fit(self, cases, y=None):
        tc = TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            seed=self.seed, base_features=self.base_features, depth=self.depth, augment=self.augment,
        )
        self.net_, self.history_ = train(list(cases), self.arm, tc)
        return self

    def predict_proba(self, cases):
        return [infer_volume(self.net_, c) for c in cases]

    def predict(self, cases):
        return [binarize(h, self.threshold) for h in self.predict_proba(cases)]

    def score(self, cases, y=None):
        """Mean lesion-wise F1 over cases where it is defined."""
        f1 = []
        for c, h in zip(cases, self.predict_proba(cases)):
            _, m = evaluate_heatmap(h, c.mask, self.threshold, self.dilation_radius, self.connectivity, c.case_id)
            if m.f1 is not None:
                f1.append(m.f1)
        return float(np.mean(f1)) if f1 else float("nan")
