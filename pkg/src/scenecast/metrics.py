"""Evaluation metrics: motion-word matching (NDMS, UMWR), a learned realism
score, root-trajectory statistics and velocity-over-time curves."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from .motion_data import SkeletonSpec
from .normalize import apply_norm, fit_norm

KAPPA = 8
REALISM_FRAMES = 50
REALISM_STRIDE = 5
VELOCITY_CLIP = 10.0


# ---------------------------------------------------------------------------
# motion words


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    words: np.ndarray        # (R, J, 3, kappa), snippet-local normalized
    kappa: int = KAPPA
    source: str = ""

    def __post_init__(self):
        if self.words.ndim != 4 or self.words.shape[0] < 1:
            raise ValueError("reference set needs at least one word of shape (J, 3, kappa)")
        if not np.all(np.isfinite(self.words)):
            raise ValueError("reference words must be finite")
        flat = np.ascontiguousarray(self.words.reshape(len(self.words), -1))
        object.__setattr__(self, "_flat", flat)
        object.__setattr__(self, "_sq", (flat * flat).sum(axis=1))

    def __len__(self):
        return self.words.shape[0]


def normalize_snippet(snippet, skeleton: SkeletonSpec):
    """Express a (J, 3, kappa) snippet in the frame fitted at its first frame."""
    return apply_norm(fit_norm(snippet, 1, skeleton), snippet)


def snippets(seq, kappa: int):
    """All kappa-frame sliding windows of a (J, 3, L) sequence: (L-kappa+1, J, 3, kappa)."""
    seq = np.asarray(seq, dtype=np.float64)
    L = seq.shape[-1]
    if L < kappa:
        raise ValueError(f"sequence of {L} frames is shorter than kappa={kappa}")
    view = np.lib.stride_tricks.sliding_window_view(seq, kappa, axis=-1)  # (J, 3, L-k+1, k)
    return np.ascontiguousarray(np.moveaxis(view, 2, 0))


def build_reference_set(sequences: Sequence, skeleton: SkeletonSpec, kappa: int = KAPPA, source: str = "") -> ReferenceSet:
    """Words from every kappa-window of every (J, 3, L) track, exact duplicates removed.

    Order is first occurrence, so the result does not depend on hashing.
    """
    if kappa < 2:
        raise ValueError("kappa must be >= 2")
    words, seen = [], set()
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.shape[-1] < kappa:
            continue
        for snip in snippets(seq, kappa):
            w = normalize_snippet(snip, skeleton)
            key = w.tobytes()
            if key in seen:
                continue
            seen.add(key)
            words.append(w)
    if not words:
        raise ValueError("no track is long enough to form a motion word")
    return ReferenceSet(np.stack(words), kappa, source)


def _match(flat_queries, refset: ReferenceSet, chunk: int = 256):
    """Exact nearest word per query; argmin returns the first (lowest) index on ties."""
    ref = refset._flat
    out_idx = np.empty(len(flat_queries), dtype=np.int64)
    out_d = np.empty(len(flat_queries))
    for a in range(0, len(flat_queries), chunk):
        q = flat_queries[a : a + chunk]
        # coarse screen with the expanded form, then exact distances on the shortlist
        approx = refset._sq[None, :] - 2.0 * q @ ref.T + (q * q).sum(axis=1)[:, None]
        for r, row in enumerate(approx):
            lo = row.min()
            tol = 1e-6 * (1.0 + abs(lo)) + 1e-9 * (refset._sq.max() + (q[r] * q[r]).sum())
            cand = np.flatnonzero(row <= lo + tol)
            d = ((ref[cand] - q[r]) ** 2).sum(axis=1)
            best = int(np.argmin(d))
            out_idx[a + r] = cand[best]
            out_d[a + r] = math.sqrt(d[best])
    return out_idx, out_d


def nearest_motion_word(snippet, refset: ReferenceSet, skeleton: Optional[SkeletonSpec] = None, normalized: bool = False):
    """Index and distance of the closest reference word (lowest index on ties)."""
    snippet = np.asarray(snippet, dtype=np.float64)
    if snippet.shape[-1] != refset.kappa:
        raise ValueError(f"snippet must have {refset.kappa} frames")
    if not normalized:
        snippet = normalize_snippet(snippet, skeleton or SkeletonSpec())
    idx, d = _match(snippet.reshape(1, -1), refset)
    return int(idx[0]), float(d[0])


def match_sequence(seq, refset: ReferenceSet, skeleton: SkeletonSpec):
    """Normalized windows of ``seq`` and their nearest word indices."""
    wins = np.stack([normalize_snippet(s, skeleton) for s in snippets(seq, refset.kappa)])
    idx, _ = _match(wins.reshape(len(wins), -1), refset)
    return wins, idx


def velocity_agreement(v, w):
    """Per-joint score ((1 + cos) / 2) * (min norm / max norm) of velocity vectors
    ``v``, ``w`` shaped (..., 3). Both zero -> 1, exactly one zero -> 0."""
    nv = np.linalg.norm(v, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    both = (nv == 0) & (nw == 0)
    one = (nv == 0) ^ (nw == 0)
    safe = ~(both | one)
    score = np.empty(nv.shape)
    score[both] = 1.0
    score[one] = 0.0
    denom = nv[safe] * nw[safe]
    cos = np.clip((v[safe] * w[safe]).sum(axis=-1) / denom, -1.0, 1.0)
    score[safe] = 0.5 * (1.0 + cos) * np.minimum(nv[safe], nw[safe]) / np.maximum(nv[safe], nw[safe])
    return score


def ndms_score(pred, input_tail, refset: ReferenceSet, skeleton: SkeletonSpec) -> float:
    """Mean velocity agreement between every window of ``input_tail ++ pred`` and
    its nearest reference word. ``pred`` (J, 3, L), ``input_tail`` (J, 3, m)."""
    seq = np.concatenate([np.asarray(input_tail, np.float64), np.asarray(pred, np.float64)], axis=-1)
    wins, idx = match_sequence(seq, refset, skeleton)
    words = refset.words[idx]
    v = np.diff(wins, axis=-1)    # (W, J, 3, kappa-1)
    w = np.diff(words, axis=-1)
    per_joint = velocity_agreement(np.moveaxis(v, 2, -1), np.moveaxis(w, 2, -1))  # (W, J, kappa-1)
    return float(per_joint.mean(axis=1).mean())


def umwr(chi, refset: ReferenceSet, skeleton: SkeletonSpec) -> float:
    """Distinct nearest words over all kappa-windows of ``chi``, divided by the window count."""
    chi = np.asarray(chi, dtype=np.float64)
    if chi.shape[-1] < refset.kappa:
        raise ValueError(f"sequence shorter than kappa={refset.kappa}")
    _, idx = match_sequence(chi, refset, skeleton)
    return len(np.unique(idx)) / (chi.shape[-1] + 1 - refset.kappa)


def umwr_at(chi, k: int, refset: ReferenceSet, skeleton: SkeletonSpec, fps: int = 25) -> float:
    """UMWR over the k-th second: the fps windows that start in that second.

    ``chi`` is the output prefixed by the last kappa-1 input frames, so window w
    ends on output frame w+1.
    """
    kappa = refset.kappa
    a = fps * (k - 1)
    b = fps * k + kappa - 1
    chi = np.asarray(chi)
    if b > chi.shape[-1]:
        raise ValueError(f"sequence too short for second {k}")
    return umwr(chi[..., a:b], refset, skeleton)


# ---------------------------------------------------------------------------
# trajectories and velocities


def root_trajectory(seq, skeleton: SkeletonSpec):
    """Planar hip midpoint per frame: (J, 3, N) -> (N, 2)."""
    seq = np.asarray(seq, dtype=np.float64)
    lh, rh = skeleton.hips
    return (0.5 * (seq[lh, :2] + seq[rh, :2])).T


def trajectory_length(r, n: int, N: int) -> float:
    """Mean step length over frames n+1..N (1-based) of a root trajectory."""
    r = np.asarray(r, dtype=np.float64)
    if not N > n >= 1:
        raise ValueError("need N > n >= 1")
    steps = r[n:N] - r[n - 1 : N - 1]
    return float(np.linalg.norm(steps, axis=1).mean())


def wasserstein1(a, b) -> float:
    """1-D empirical W1 as the integral of |F_a^-1 - F_b^-1| over [0, 1]."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    if a.size == b.size:
        return float(np.abs(a - b).mean())
    # piecewise constant quantile functions; integrate over the merged breakpoints
    qs = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
    edges = np.concatenate([[0.0], qs, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    ia = np.minimum((mids * a.size).astype(np.int64), a.size - 1)
    ib = np.minimum((mids * b.size).astype(np.int64), b.size - 1)
    return float((np.abs(a[ia] - b[ib]) * np.diff(edges)).sum())


def speeds(seq, skeleton: SkeletonSpec, fps: float, clip: float = VELOCITY_CLIP):
    """Planar hip-center speed per frame transition (m/s), clipped: (N-1,)."""
    r = root_trajectory(seq, skeleton)
    v = np.linalg.norm(np.diff(r, axis=0), axis=1) * fps
    return np.minimum(v, clip)


def velocity_curve(sequences, skeleton: SkeletonSpec, fps: Optional[float] = None, clip: float = VELOCITY_CLIP):
    """Frame-wise mean clipped speed over a set of equally long sequences."""
    fps = skeleton.fps if fps is None else fps
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences")
    return np.mean([speeds(s, skeleton, fps, clip) for s in sequences], axis=0)


# ---------------------------------------------------------------------------
# realism classifier


def dct_matrix(L: int) -> np.ndarray:
    """Orthonormal DCT-II as a matrix: coeffs = D @ signal."""
    k = np.arange(L)[:, None]
    i = np.arange(L)[None, :]
    D = np.cos(np.pi * (2 * i + 1) * k / (2 * L)) * math.sqrt(2.0 / L)
    D[0] /= math.sqrt(2.0)
    return D


class RealismClassifier(nn.Module):
    """Per-joint DCT features through a shared layer, then two dense layers."""

    def __init__(self, joints: int = 17, frames: int = REALISM_FRAMES, hidden: int = 32, width: int = 512):
        super().__init__()
        self.joints, self.frames = joints, frames
        self.register_buffer("dct", torch.from_numpy(dct_matrix(frames)).float())
        # per-coefficient standardization, fitted on the training windows
        self.register_buffer("feat_mean", torch.zeros(joints, 3, frames))
        self.register_buffer("feat_std", torch.ones(joints, 3, frames))
        self.fc1 = nn.Linear(3 * frames, hidden)
        self.fc2 = nn.Linear(joints * hidden, width)
        self.fc3 = nn.Linear(width, 1)

    def logits(self, x):
        """x: (B, J, 3, frames) normalized sequences."""
        if x.shape[-1] != self.frames:
            raise ValueError(f"classifier expects {self.frames} frames, got {x.shape[-1]}")
        coeffs = (x @ self.dct.T - self.feat_mean) / self.feat_std  # (B, J, 3, F)
        h = torch.relu(self.fc1(coeffs.flatten(2)))  # (B, J, hidden)
        h = torch.relu(self.fc2(h.flatten(1)))
        return self.fc3(h).squeeze(-1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def normalize_window(seq, skeleton: SkeletonSpec):
    """Realism input: a window expressed in the frame fitted at its first frame."""
    return apply_norm(fit_norm(seq, 1, skeleton), seq)


def realism_forward(x50, model: RealismClassifier, skeleton: Optional[SkeletonSpec] = None, normalized: bool = True) -> float:
    x50 = np.asarray(x50, dtype=np.float64)
    if x50.shape[-1] != model.frames:
        raise ValueError(f"expected {model.frames} frames, got {x50.shape[-1]}")
    if not normalized:
        x50 = normalize_window(x50, skeleton or SkeletonSpec())
    with torch.no_grad():
        return float(model(torch.from_numpy(x50[None]).float())[0])


def realism_windows(seq, skeleton: SkeletonSpec, limit: Optional[int] = None, frames: int = REALISM_FRAMES,
                    stride: int = REALISM_STRIDE):
    """Normalized windows starting every ``stride`` frames that end within ``limit`` frames."""
    seq = np.asarray(seq, dtype=np.float64)
    L = seq.shape[-1] if limit is None else min(limit, seq.shape[-1])
    if L < frames:
        raise ValueError(f"need at least {frames} frames, got {L}")
    return np.stack([normalize_window(seq[..., s : s + frames], skeleton) for s in range(0, L - frames + 1, stride)])


def realism_at_k(seq, model, k: float, skeleton: SkeletonSpec, fps: Optional[float] = None) -> float:
    """Mean score over the 50-frame windows (offset 5) inside the first k seconds."""
    fps = skeleton.fps if fps is None else fps
    wins = realism_windows(seq, skeleton, int(round(k * fps)), getattr(model, "frames", REALISM_FRAMES))
    with torch.no_grad():
        return float(model(torch.from_numpy(wins).float()).mean())


def auc_score(labels, scores) -> float:
    """ROC AUC through the rank-sum statistic (ties get average ranks)."""
    labels = np.asarray(labels, bool)
    pos, neg = labels.sum(), (~labels).sum()
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2) / (pos * neg))


@dataclass
class RealismReport:
    accuracy: float
    auc: float
    train_size: int
    test_size: int


def train_realism(real, synthetic, joints: int = 17, epochs: int = 6, batch_size: int = 16, lr: float = 1e-3,
                  holdout: float = 0.2, seed: int = 0):
    """Binary classifier real (1) vs synthetic (0) on normalized 50-frame windows.

    Returns ``(model, RealismReport)`` with accuracy and AUC on a held-out split.
    """
    real = np.asarray(real, dtype=np.float32)
    synthetic = np.asarray(synthetic, dtype=np.float32)
    if len(real) == 0 or len(synthetic) == 0:
        raise ValueError("both classes need at least one window")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    x = np.concatenate([real, synthetic])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(synthetic))]).astype(np.float32)
    test = np.zeros(len(x), bool)
    for cls in (1.0, 0.0):
        members = rng.permutation(np.flatnonzero(y == cls))
        test[members[: int(round(holdout * len(members)))]] = True
    train_idx = np.flatnonzero(~test)
    model = RealismClassifier(joints, x.shape[-1])
    with torch.no_grad():
        coeffs = torch.from_numpy(x[train_idx]) @ model.dct.T
        model.feat_mean.copy_(coeffs.mean(0))
        model.feat_std.copy_(coeffs.std(0).clamp_min(1e-6))
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    loss_fn = nn.BCEWithLogitsLoss()
    xt, yt = torch.from_numpy(x), torch.from_numpy(y)
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        for a in range(0, len(order), batch_size):
            b = torch.from_numpy(order[a : a + batch_size])
            loss = loss_fn(model.logits(xt[b]), yt[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    if test.sum() and len(np.unique(y[test])) == 2:
        with torch.no_grad():
            scores = model(xt[torch.from_numpy(np.flatnonzero(test))]).numpy()
        acc = float(((scores > 0.5) == (y[test] > 0.5)).mean())
        auc = auc_score(y[test] > 0.5, scores)
    else:
        acc, auc = float("nan"), float("nan")
    return model, RealismReport(acc, auc, int((~test).sum()), int(test.sum()))
