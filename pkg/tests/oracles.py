"""Independent brute-force oracles used to verify production implementations.

These deliberately avoid the library code paths they check: connected
components by explicit flood fill, surface distances by all-pairs
comparison, gradients by central finite differences, and the federated
protocol by a plain in-process loop over sites.
"""

from __future__ import annotations

from collections import deque
from dataclasses import replace

import numpy as np

from fedrad.fedproto import aggregate
from fedrad.fingerprint import average_fingerprints, compute_fingerprint, derive_config
from fedrad.learner import build_training_matrix, loss_and_grad, site_train_seed, train_epochs

_OFFSETS_26 = [(dz, dy, dx)
               for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]


def flood_fill_components(labels: np.ndarray, class_id: int) -> list[int]:
    """Sizes of 26-connected components of one class, by BFS flood fill."""
    mask = labels == class_id
    seen = np.zeros_like(mask, dtype=bool)
    sizes = []
    dims = mask.shape
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        size = 0
        queue = deque([start])
        seen[start] = True
        while queue:
            z, y, x = queue.popleft()
            size += 1
            for dz, dy, dx in _OFFSETS_26:
                nz, ny, nx = z + dz, y + dy, x + dx
                if (0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]
                        and mask[nz, ny, nx] and not seen[nz, ny, nx]):
                    seen[nz, ny, nx] = True
                    queue.append((nz, ny, nx))
        sizes.append(size)
    return sorted(sizes)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """(k, 3) coordinates of voxels of the set with a 6-neighbor outside it."""
    coords = []
    dims = mask.shape
    for z, y, x in zip(*np.nonzero(mask)):
        on_border = False
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            if not (0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]):
                on_border = True
                break
            if not mask[nz, ny, nx]:
                on_border = True
                break
        if on_border:
            coords.append((z, y, x))
    return np.asarray(coords, dtype=float)


def all_pairs_min_dists(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """For every src boundary voxel, its distance in mm to the nearest dst voxel."""
    sp = np.asarray(spacing, dtype=float)
    diffs = (src[:, None, :] - dst[None, :, :]) * sp[None, None, :]
    return np.sqrt((diffs ** 2).sum(axis=2)).min(axis=1)


def brute_dsc(pred: np.ndarray, ref: np.ndarray, class_id: int) -> float:
    p = pred == class_id
    r = ref == class_id
    inter = 0
    for idx in zip(*np.nonzero(p)):
        if r[idx]:
            inter += 1
    return 2.0 * inter / (int(p.sum()) + int(r.sum()))


def brute_nsd(pred, ref, class_id, spacing, tau) -> float:
    bp = boundary_voxels(pred == class_id)
    br = boundary_voxels(ref == class_id)
    close = 0
    if len(br):
        d = (all_pairs_min_dists(br, bp, spacing) if len(bp)
             else np.full(len(br), np.inf))
        close += int((d <= tau).sum())
    if len(bp):
        d = (all_pairs_min_dists(bp, br, spacing) if len(br)
             else np.full(len(bp), np.inf))
        close += int((d <= tau).sum())
    return close / (len(bp) + len(br))


def brute_hsd(pred, ref, class_id, spacing) -> float:
    bp = boundary_voxels(pred == class_id)
    br = boundary_voxels(ref == class_id)
    d1 = all_pairs_min_dists(br, bp, spacing).max()
    d2 = all_pairs_min_dists(bp, br, spacing).max()
    return float(max(d1, d2))


def brute_nave(pred, ref, class_id) -> float:
    n_p = 0
    n_r = 0
    for v in pred.ravel():
        n_p += v == class_id
    for v in ref.ravel():
        n_r += v == class_id
    return abs(int(n_p) - int(n_r)) / int(n_r)


def finite_diff_grad(w, features, labels, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the batch loss."""
    grad = np.zeros_like(w)
    for k in range(len(w)):
        wp = w.copy()
        wp[k] += step
        lp, _ = loss_and_grad(wp, features, labels)
        wm = w.copy()
        wm[k] -= step
        lm, _ = loss_and_grad(wm, features, labels)
        grad[k] = (lp - lm) / (2 * step)
    return grad


def sequential_federated_reference(datasets, train_config, experiment_seed, rounds):
    """Single-process reference: loop sites in order and apply the update rule.

    Shares the training and fingerprint primitives with production code but
    none of the protocol machinery (no transport, no server, no simulator).
    """
    site_ids = sorted(datasets)
    fps = [compute_fingerprint(datasets[s].train) for s in site_ids]
    fp_avg = average_fingerprints(fps)
    derived = derive_config(fp_avg, experiment_seed, train_config)
    w = derived.init_weights.copy()
    matrices = {s: build_training_matrix(datasets[s].train, derived.feature_config)
                for s in site_ids}
    cfgs = {s: replace(train_config, epochs=1, seed=site_train_seed(train_config.seed, s))
            for s in site_ids}
    for t in range(1, rounds + 1):
        deltas = {}
        for s in site_ids:
            trained = train_epochs(w, matrices[s][0], matrices[s][1], cfgs[s], start_epoch=t)
            deltas[s] = trained - w
        w = aggregate(w, deltas, n_sites=len(site_ids))
    return w, derived
