"""Trajectory accuracy metrics: absolute error after rigid alignment, drift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_DT = 0.010  # s, stamp association window


@dataclass(frozen=True)
class AteResult:
    rmse: float
    n_pairs: int
    rotation: np.ndarray     # aligning rotation applied to the estimate
    translation: np.ndarray
    errors: np.ndarray       # per-pair distances after alignment


def associate(stamps_a: np.ndarray, stamps_b: np.ndarray,
              max_dt: float = DEFAULT_MAX_DT) -> list[tuple[int, int]]:
    """Pair each stamp in a with its nearest stamp in b, within max_dt.

    Greedy nearest-neighbour; each index of b is used at most once.
    """
    stamps_a = np.asarray(stamps_a, dtype=float)
    stamps_b = np.asarray(stamps_b, dtype=float)
    order_b = np.argsort(stamps_b)
    sorted_b = stamps_b[order_b]
    used = set()
    pairs = []
    for i, t in enumerate(stamps_a):
        k = np.searchsorted(sorted_b, t)
        best = None
        for j in (k - 1, k):
            if 0 <= j < len(sorted_b):
                dt = abs(sorted_b[j] - t)
                if dt <= max_dt and (best is None or dt < best[0]):
                    best = (dt, order_b[j])
        if best is not None and best[1] not in used:
            used.add(best[1])
            pairs.append((i, int(best[1])))
    return pairs


def rigid_align(source: np.ndarray, target: np.ndarray):
    """Least-squares rotation and translation mapping source onto target.

    Closed-form orthogonal fit via SVD of the cross-covariance; no scale.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError("expected matching (N, 3) arrays")
    if len(source) < 3:
        raise ValueError("need at least 3 point pairs for alignment")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    h = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = mu_t - rot @ mu_s
    return rot, trans


def compute_ate(est_stamps, est_positions, gt_stamps, gt_positions,
                max_dt: float = DEFAULT_MAX_DT) -> AteResult:
    """RMSE of translational error after stamp association and rigid alignment."""
    est_positions = np.asarray(est_positions, dtype=float)
    gt_positions = np.asarray(gt_positions, dtype=float)
    pairs = associate(est_stamps, gt_stamps, max_dt=max_dt)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated pose pairs; need >= 3")
    ei = np.array([p[0] for p in pairs])
    gi = np.array([p[1] for p in pairs])
    rot, trans = rigid_align(est_positions[ei], gt_positions[gi])
    aligned = est_positions[ei] @ rot.T + trans
    errors = np.linalg.norm(aligned - gt_positions[gi], axis=1)
    return AteResult(rmse=float(np.sqrt(np.mean(errors ** 2))),
                     n_pairs=len(pairs), rotation=rot, translation=trans,
                     errors=errors)


def end_to_end_error(positions: np.ndarray) -> float:
    """Distance between the first and last trajectory positions."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        raise ValueError("need at least two positions")
    return float(np.linalg.norm(positions[-1] - positions[0]))
