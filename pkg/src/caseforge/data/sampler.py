"""P-K batch sampling with triplet indices and pose-varied partners."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import SamplingError
from .render import to_grayscale

log = logging.getLogger(__name__)


@dataclass
class TrainingBatch:
    x_rgb: torch.Tensor         # (B, H, W, 3)
    x_gray: torch.Tensor        # (B, H, W, 3)
    x_rgb_prime: torch.Tensor   # (B, H, W, 3) same identity, different pose/view
    labels: torch.Tensor        # (B,) contiguous class index
    pos_idx: torch.Tensor       # (B,) in-batch positive
    neg_idx: torch.Tensor       # (B,) in-batch negative
    rows: np.ndarray            # (B,) train-split row of each anchor
    prime_rows: np.ndarray      # (B,) train-split row of each partner

    def __len__(self):
        return int(self.labels.shape[0])


class TrainIndex:
    """Per-identity row lists for the train split, built once per manifest."""

    def __init__(self, manifest):
        recs = manifest.records("train")
        if not recs:
            raise SamplingError("train split is empty")
        label_of = manifest.train_labels()
        self.labels = np.array([label_of[r.identity_id] for r in recs], dtype=np.int64)
        self.pose_view = np.array([(r.pose_id, r.view_id) for r in recs], dtype=np.int64)
        self.by_label = {}
        for row, lab in enumerate(self.labels):
            self.by_label.setdefault(int(lab), []).append(row)
        self.by_label = {k: np.array(v) for k, v in self.by_label.items()}
        self.label_list = np.array(sorted(self.by_label))
        if len(self.label_list) < 2:
            raise SamplingError("train split has a single identity; negatives are impossible")

    def partner(self, row: int, rng) -> int:
        """Another row of the same identity with a different (pose, view), if one exists."""
        same = self.by_label[int(self.labels[row])]
        pv = self.pose_view[row]
        alt = same[np.any(self.pose_view[same] != pv, axis=1)]
        if len(alt) == 0:
            alt = same
        return int(alt[rng.integers(len(alt))])


def _index(manifest) -> TrainIndex:
    idx = manifest._cache.get("_train_index")
    if idx is None:
        idx = TrainIndex(manifest)
        manifest._cache["_train_index"] = idx
    return idx


def sample_indices(manifest, batch_size: int, rng, num_instances: int = 4):
    """Draw P identities x K instances; return (rows, pos_idx, neg_idx, prime_rows)."""
    k = num_instances
    if k < 1 or batch_size % k:
        raise SamplingError(f"batch_size={batch_size} is not a multiple of num_instances={k}")
    p = batch_size // k
    index = _index(manifest)
    n_ids = len(index.label_list)
    if p > n_ids:
        raise SamplingError(f"batch needs {p} identities but train split has {n_ids}")
    if p < 2:
        raise SamplingError("a batch needs at least 2 identities for negatives")
    chosen = rng.choice(index.label_list, size=p, replace=False)
    rows = []
    for lab in chosen:
        pool = index.by_label[int(lab)]
        replace = len(pool) < k
        if replace and k > 1:
            log.warning("identity %d has %d sample(s) < K=%d; sampling with replacement", lab, len(pool), k)
        rows.extend(int(r) for r in rng.choice(pool, size=k, replace=replace))
    rows = np.array(rows, dtype=np.int64)

    pos = np.empty(batch_size, dtype=np.int64)
    neg = np.empty(batch_size, dtype=np.int64)
    for i in range(batch_size):
        block = i // k
        same = [block * k + j for j in range(k) if block * k + j != i] or [i]
        pos[i] = same[rng.integers(len(same))]
        other = rng.integers(batch_size - k)
        neg[i] = other if other < block * k else other + k
    prime = np.array([index.partner(int(r), rng) for r in rows], dtype=np.int64)
    return rows, pos, neg, prime


def sample_batch(manifest, batch_size: int, rng, num_instances: int = 4) -> TrainingBatch:
    rows, pos, neg, prime = sample_indices(manifest, batch_size, rng, num_instances)
    images = manifest.images("train")
    index = _index(manifest)
    x_rgb = torch.from_numpy(images[rows])
    return TrainingBatch(
        x_rgb=x_rgb,
        x_gray=to_grayscale(x_rgb),
        x_rgb_prime=torch.from_numpy(images[prime]),
        labels=torch.from_numpy(index.labels[rows]),
        pos_idx=torch.from_numpy(pos),
        neg_idx=torch.from_numpy(neg),
        rows=rows,
        prime_rows=prime,
    )
