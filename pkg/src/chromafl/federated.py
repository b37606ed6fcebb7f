"""Federated rounds, robust aggregation, and saliency-drift measurement.

A round selects a client subset, local-trains each from the current global,
lets adversarial clients recolor their data against that same global first,
and aggregates.  All randomness flows from per-purpose seed sequences of
(seed, tag, round, client), so a run is reproducible bit-for-bit and an
all-benign twin run shares every selection and shuffle with its attacked
counterpart.

Drift is measured against a reference model (normally the twin at the same
round): Delta = mean over probe images of (1 - SSIM(reference CAM, current
CAM)), each CAM taken for the reference model's predicted class.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import attack as A
from . import data as D
from . import models as M
from . import saliency as S

BENIGN = "benign"
ADVERSARIAL = "adversarial"

FEDAVG = "fedavg"
TRIMMED_MEAN = "trimmed_mean"
MEDIAN = "median"
FLTRUST = "fltrust"
AGGREGATORS = (FEDAVG, TRIMMED_MEAN, MEDIAN, FLTRUST)

# seed-stream tags so independent draws never collide
_TAG_SELECT = 0x51
_TAG_LOCAL = 0x7A
_TAG_SERVER = 0x5E
_TAG_ROLES = 0xA0


@dataclass
class ClientState:
    """One simulated participant: an id, a role, and a private shard."""

    cid: int
    role: str
    data: D.LabeledDataset

    def __post_init__(self):
        if self.role not in (BENIGN, ADVERSARIAL):
            raise ValueError(f"role must be benign or adversarial, got {self.role!r}")
        if len(self.data) == 0:
            raise ValueError(f"client {self.cid} has no data")


@dataclass(frozen=True)
class FLConfig:
    """Knobs for one federated run."""

    select_k: int = 5
    local_epochs: int = 1
    lr: float = 0.05
    batch: int = 32
    aggregator: str = FEDAVG
    trim_k: int = 1
    seed: int = 0
    grid: A.GridSpec = A.GridSpec()

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; "
                             f"choose from {AGGREGATORS}")
        if self.select_k < 1:
            raise ValueError("select_k must be >= 1")
        if self.trim_k < 0:
            raise ValueError("trim_k must be >= 0")


@dataclass(frozen=True)
class RoundMetrics:
    """Per-round report: utility plus interpretability degradation."""

    round: int
    adv_ratio: float
    accuracy: float
    fidelity_pct: float
    ssim_gc_mean: float
    ssim_gc_std: float
    ssim_gcpp_mean: float
    ssim_gcpp_std: float
    peak_pct_mean: float
    l1_mean: float

    FIELDS = ("round", "adv_ratio", "accuracy", "fidelity_pct",
              "ssim_gc_mean", "ssim_gc_std", "ssim_gcpp_mean",
              "ssim_gcpp_std", "peak_pct_mean", "l1_mean")

    def as_row(self) -> tuple:
        return (self.round, self.adv_ratio, self.accuracy, self.fidelity_pct,
                self.ssim_gc_mean, self.ssim_gc_std, self.ssim_gcpp_mean,
                self.ssim_gcpp_std, self.peak_pct_mean, self.l1_mean)


def _child_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def _flatten(weights) -> np.ndarray:
    return np.concatenate([np.asarray(w, dtype=np.float64).reshape(-1)
                           for w in weights])


def _check_same_shapes(stacks) -> None:
    first = [np.asarray(w).shape for w in stacks[0]]
    for ws in stacks[1:]:
        if [np.asarray(w).shape for w in ws] != first:
            raise ValueError("client updates have mismatched weight shapes")


# ---------------------------------------------------------------- aggregators

def fedavg(updates: list[tuple[list[np.ndarray], int]]) -> list[np.ndarray]:
    """Sample-count weighted average of client weights."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    stacks = [ws for ws, _ in updates]
    counts = np.array([n for _, n in updates], dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("client sample counts must be positive")
    _check_same_shapes(stacks)
    total = counts.sum()
    out = []
    for layer in zip(*stacks):
        acc = np.zeros(np.asarray(layer[0]).shape, dtype=np.float64)
        for w, n in zip(layer, counts):
            acc += np.asarray(w, dtype=np.float64) * n
        out.append((acc / total).astype(np.asarray(layer[0]).dtype, copy=False))
    return out


def trimmed_mean(client_weights: list[list[np.ndarray]], trim_k: int) -> list[np.ndarray]:
    """Coordinate-wise mean after dropping the trim_k lowest and highest."""
    n = len(client_weights)
    if trim_k < 0:
        raise ValueError("trim_k must be >= 0")
    if 2 * trim_k >= n:
        raise ValueError(f"trim_k={trim_k} removes every one of {n} updates")
    _check_same_shapes(client_weights)
    out = []
    for layer in zip(*client_weights):
        stack = np.sort(np.stack([np.asarray(w, dtype=np.float64) for w in layer]),
                        axis=0)
        kept = stack[trim_k: n - trim_k]
        out.append(kept.mean(axis=0).astype(np.asarray(layer[0]).dtype, copy=False))
    return out


def median(client_weights: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Coordinate-wise median across client weights."""
    if not client_weights:
        raise ValueError("median needs at least one update")
    _check_same_shapes(client_weights)
    out = []
    for layer in zip(*client_weights):
        stack = np.stack([np.asarray(w, dtype=np.float64) for w in layer])
        out.append(np.median(stack, axis=0).astype(np.asarray(layer[0]).dtype,
                                                   copy=False))
    return out


def fltrust(global_weights, client_weights: list[list[np.ndarray]],
            server_weights) -> list[np.ndarray]:
    """Trust-weighted aggregation anchored to a server-trained update.

    Client deltas are cosine-scored against the server delta (negative scores
    clip to zero trust) and rescaled to the server delta's norm.  A zero
    server delta or zero total trust leaves the global model unchanged.
    """
    g = [np.asarray(w) for w in global_weights]
    server_delta = _flatten(server_weights) - _flatten(g)
    server_norm = float(np.linalg.norm(server_delta))
    if server_norm == 0.0:
        warnings.warn("fltrust: server update is zero; round skipped")
        return [w.copy() for w in g]
    flat_g = _flatten(g)
    agg = np.zeros_like(server_delta)
    total_trust = 0.0
    for ws in client_weights:
        delta = _flatten(ws) - flat_g
        norm = float(np.linalg.norm(delta))
        if norm == 0.0:
            continue
        trust = max(0.0, float(delta @ server_delta) / (norm * server_norm))
        if trust == 0.0:
            continue
        agg += trust * (delta * (server_norm / norm))
        total_trust += trust
    if total_trust == 0.0:
        warnings.warn("fltrust: no client earned trust; round skipped")
        return [w.copy() for w in g]
    agg /= total_trust
    out = []
    off = 0
    for w in g:
        n = w.size
        out.append((w.astype(np.float64) + agg[off:off + n].reshape(w.shape))
                   .astype(w.dtype, copy=False))
        off += n
    return out


# ---------------------------------------------------------------- rounds

def select_clients(n_clients: int, k: int, seed: int, round_index: int) -> np.ndarray:
    """Uniform without-replacement selection, deterministic per (seed, round)."""
    if k > n_clients:
        raise ValueError(f"cannot select {k} of {n_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_SELECT, round_index)))
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def assign_roles(n_clients: int, adv_ratio: float, seed: int) -> list[str]:
    """Mark round(adv_ratio * n) clients adversarial, chosen by seeded draw."""
    if not 0.0 <= adv_ratio <= 1.0:
        raise ValueError(f"adv_ratio must be in [0, 1], got {adv_ratio}")
    n_adv = int(round(adv_ratio * n_clients))
    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_ROLES)))
    adv = set(rng.permutation(n_clients)[:n_adv].tolist())
    return [ADVERSARIAL if i in adv else BENIGN for i in range(n_clients)]


def run_round(spec: M.ModelSpec, global_weights, clients: list[ClientState],
              cfg: FLConfig, round_index: int,
              server_root: D.LabeledDataset | None = None,
              probe_images=None, reference_weights=None,
              test: D.LabeledDataset | None = None,
              ) -> tuple[list[np.ndarray], RoundMetrics | None]:
    """One federated round; returns the new global plus optional metrics.

    Adversarial clients re-poison their shard against the incoming global
    every round, so the attack tracks the model as it drifts.  When
    ``probe_images`` is given the new global is scored against
    ``reference_weights`` (normally the vanilla twin at the same round).
    """
    selected = select_clients(len(clients), cfg.select_k, cfg.seed, round_index)
    updates: list[tuple[list[np.ndarray], int]] = []
    for cid in selected:
        client = clients[cid]
        shard = client.data
        if client.role == ADVERSARIAL:
            shard, _ = A.poison_dataset(spec, global_weights, shard, cfg.grid)
        local_seed = _child_seed(cfg.seed, _TAG_LOCAL, round_index, int(cid))
        w_i = M.train(spec, global_weights, shard, cfg.local_epochs,
                      lr=cfg.lr, batch=cfg.batch, seed=local_seed)
        updates.append((w_i, len(shard)))

    if cfg.aggregator == FEDAVG:
        new_global = fedavg(updates)
    elif cfg.aggregator == TRIMMED_MEAN:
        new_global = trimmed_mean([w for w, _ in updates], cfg.trim_k)
    elif cfg.aggregator == MEDIAN:
        new_global = median([w for w, _ in updates])
    else:  # FLTRUST
        if server_root is None:
            raise ValueError("fltrust aggregation needs a server_root dataset")
        server_seed = _child_seed(cfg.seed, _TAG_SERVER, round_index)
        server_w = M.train(spec, global_weights, server_root, cfg.local_epochs,
                           lr=cfg.lr, batch=cfg.batch, seed=server_seed)
        new_global = fltrust(global_weights, [w for w, _ in updates], server_w)

    metrics = None
    if probe_images is not None:
        reference = reference_weights if reference_weights is not None else new_global
        adv_ratio = sum(c.role == ADVERSARIAL for c in clients) / len(clients)
        metrics = compute_round_metrics(spec, reference, new_global, probe_images,
                                        test=test, round_index=round_index,
                                        adv_ratio=adv_ratio)
    return new_global, metrics


def compute_round_metrics(spec: M.ModelSpec, reference_weights, current_weights,
                          probe_images, test: D.LabeledDataset | None = None,
                          k_fraction: float = 0.1, round_index: int = 0,
                          adv_ratio: float = 0.0) -> RoundMetrics:
    """Compare the current global against a reference on fixed probe images.

    CAMs on both models target the reference model's predicted class per
    probe image, so the metric isolates explanation movement from label
    movement.  When reference and current weights are bit-identical the
    SSIM/peak/L1 columns come out exactly 1.0 / 100.0 / 0.0.
    """
    probe = np.asarray(probe_images)
    ref_labels, _ = M.predict_batch(spec, reference_weights, probe)

    gc_ref = S.grad_cam(spec, reference_weights, probe, ref_labels)
    gc_cur = S.grad_cam(spec, current_weights, probe, ref_labels)
    gpp_ref = S.grad_cam_pp(spec, reference_weights, probe, ref_labels)
    gpp_cur = S.grad_cam_pp(spec, current_weights, probe, ref_labels)

    ssim_gc = S.ssim(gc_ref, gc_cur)
    ssim_gpp = S.ssim(gpp_ref, gpp_cur)
    peaks = np.array([S.peak_overlap(gc_ref[i], gc_cur[i], k_fraction)
                      for i in range(probe.shape[0])])
    l1 = S.l1_distance(gc_ref, gc_cur)

    if test is not None:
        acc = 100.0 * M.accuracy(spec, current_weights, test)
        fid = 100.0 * M.agreement(spec, reference_weights, current_weights, test.images)
    else:
        acc = float("nan")
        fid = 100.0 * M.agreement(spec, reference_weights, current_weights, probe)

    return RoundMetrics(
        round=round_index,
        adv_ratio=float(adv_ratio),
        accuracy=float(acc),
        fidelity_pct=float(fid),
        ssim_gc_mean=float(ssim_gc.mean()),
        ssim_gc_std=float(ssim_gc.std()),
        ssim_gcpp_mean=float(ssim_gpp.mean()),
        ssim_gcpp_std=float(ssim_gpp.std()),
        peak_pct_mean=float(peaks.mean()),
        l1_mean=float(np.asarray(l1).mean()),
    )


def saliency_drift(spec: M.ModelSpec, weights_reference, weights_current,
                   probe_images) -> float:
    """Mean (1 - SSIM) between the two models' CAMs over probe images."""
    probe = np.asarray(probe_images)
    labels, _ = M.predict_batch(spec, weights_reference, probe)
    cams_ref = S.grad_cam(spec, weights_reference, probe, labels)
    cams_cur = S.grad_cam(spec, weights_current, probe, labels)
    return float((1.0 - S.ssim(cams_ref, cams_cur)).mean())


def fit_drift_slope(series) -> float:
    """Least-squares slope of drift ~ alpha * (r * t) through the origin.

    ``series`` holds (round, adversary_ratio, drift) triples.
    """
    pts = [(float(t), float(r), float(d)) for t, r, d in series]
    if not pts:
        raise ValueError("drift series is empty")
    x = np.array([t * r for t, r, _ in pts], dtype=np.float64)
    d = np.array([d for _, _, d in pts], dtype=np.float64)
    denom = float((x * x).sum())
    if denom == 0.0:
        raise ValueError("drift series has no attacked rounds (all r*t are zero)")
    return float((x * d).sum() / denom)


def drift_r_squared(series, alpha: float) -> float:
    """Uncentered R^2 of the through-origin drift fit."""
    pts = [(float(t), float(r), float(d)) for t, r, d in series]
    x = np.array([t * r for t, r, _ in pts], dtype=np.float64)
    d = np.array([dd for _, _, dd in pts], dtype=np.float64)
    total = float((d * d).sum())
    if total == 0.0:
        return 1.0
    resid = d - alpha * x
    return 1.0 - float((resid * resid).sum()) / total
