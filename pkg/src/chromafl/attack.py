"""Label-preserving color attacks on saliency.

The grid attack enumerates a deterministic candidate list of color transforms
for each image, keeps only candidates the attacked model still classifies the
same way, and returns the feasible candidate whose Grad-CAM is least similar
(SSIM) to the original image's.  The identity transform is always candidate
zero, so the search can never make a sample infeasible: when nothing else
survives the prediction check, the image passes through untouched with the
fallback flag raised.

The random skew baseline draws a hue/saturation/per-channel recolor at
comparable perceptual strength but with no model in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import color as C
from . import data as D
from . import models as M
from . import saliency as S


@dataclass(frozen=True)
class GridSpec:
    """Candidate values for the color-transform search.

    ``candidates()`` renders these into an ordered list of parameter sets:
    identity first, then hue shifts, channel rescales (uniform, then
    single-channel when ``per_channel``), contrast jitters, and finally
    pairwise composites of the non-identity values (hue x rescale, hue x
    jitter, rescale x jitter) when ``composites`` is on.  The list is
    truncated to ``max_candidates`` entries, identity always surviving.
    """

    hue: tuple[float, ...] = (0.0, 0.05, -0.05, 0.10, -0.10, 0.15, -0.15)
    alpha: tuple[float, ...] = (0.6, 0.8, 1.0, 1.2, 1.4)
    per_channel: bool = True
    gamma: tuple[float, ...] = (0.8, 1.0, 1.2)
    beta: tuple[float, ...] = (-0.1, 0.0, 0.1)
    composites: bool = True
    max_candidates: int = 500

    def __post_init__(self):
        if self.max_candidates < 1:
            raise ValueError("max_candidates must be >= 1")
        for a in self.alpha:
            if not 0.5 <= a <= 1.5:
                raise ValueError(f"alpha grid value {a} outside [0.5, 1.5]")
        for g in self.gamma:
            if g <= 0:
                raise ValueError(f"gamma grid value {g} must be positive")

    def candidates(self) -> list[C.PerturbationParams]:
        hues = [d for d in self.hue if d != 0.0]
        alphas = [a for a in self.alpha if a != 1.0]
        jitters = [(g, b) for g in self.gamma for b in self.beta
                   if not (g == 1.0 and b == 0.0)]

        out: list[C.PerturbationParams] = [C.PerturbationParams.identity()]
        for d in hues:
            out.append(C.PerturbationParams(delta=d))
        for a in alphas:
            out.append(C.PerturbationParams(alpha=(a, a, a)))
        if self.per_channel:
            for ch in range(3):
                for a in alphas:
                    alpha = tuple(a if c == ch else 1.0 for c in range(3))
                    out.append(C.PerturbationParams(alpha=alpha))
        for g, b in jitters:
            out.append(C.PerturbationParams(gamma=g, beta=b))
        if self.composites:
            for d in hues:
                for a in alphas:
                    out.append(C.PerturbationParams(delta=d, alpha=(a, a, a)))
            for d in hues:
                for g, b in jitters:
                    out.append(C.PerturbationParams(delta=d, gamma=g, beta=b))
            for a in alphas:
                for g, b in jitters:
                    out.append(C.PerturbationParams(alpha=(a, a, a), gamma=g, beta=b))

        seen: set[tuple] = set()
        unique: list[C.PerturbationParams] = []
        for theta in out:
            key = theta.as_row()
            if key not in seen:
                seen.add(key)
                unique.append(theta)
            if len(unique) == self.max_candidates:
                break
        return unique

    @classmethod
    def hue_only(cls, hue=(0.0, 0.05, -0.05, 0.10, -0.10, 0.15, -0.15)) -> "GridSpec":
        return cls(hue=hue, alpha=(1.0,), per_channel=False,
                   gamma=(1.0,), beta=(0.0,), composites=False)

    @classmethod
    def rescale_only(cls, alpha=(0.6, 0.8, 1.0, 1.2, 1.4),
                     per_channel: bool = True) -> "GridSpec":
        return cls(hue=(0.0,), alpha=alpha, per_channel=per_channel,
                   gamma=(1.0,), beta=(0.0,), composites=False)

    @classmethod
    def jitter_only(cls, gamma=(0.8, 1.0, 1.2), beta=(-0.1, 0.0, 0.1)) -> "GridSpec":
        return cls(hue=(0.0,), alpha=(1.0,), per_channel=False,
                   gamma=gamma, beta=beta, composites=False)


@dataclass(frozen=True)
class AttackOutcome:
    """What the grid search decided for one sample."""

    theta: C.PerturbationParams
    ssim: float
    delta_e: float
    fallback: bool
    n_feasible: int
    n_candidates: int
    label: int


def cpm_perturb(spec: M.ModelSpec, weights, x, grid: GridSpec
                ) -> tuple[np.ndarray, AttackOutcome]:
    """Find the feasible transform that most degrades the image's Grad-CAM.

    Feasible means the model's predicted class is unchanged.  Ties in SSIM
    resolve to the earlier candidate in grid order; since identity is always
    candidate zero and always feasible, the worst case returns the original
    image with ``fallback`` set.
    """
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"cpm_perturb takes one (H, W, 3) image, got shape {arr.shape}")
    thetas = grid.candidates()
    imgs = np.stack([C.apply(t, arr) for t in thetas])
    labels, _ = M.predict_batch(spec, weights, imgs)
    base_label = int(labels[0])  # candidate 0 is the untouched image
    feasible = np.flatnonzero(labels == base_label)
    cams = S.grad_cam(spec, weights, imgs[feasible], base_label)
    base_pos = int(np.flatnonzero(feasible == 0)[0])
    scores = S.ssim(np.broadcast_to(cams[base_pos], cams.shape), cams)

    best_pos = 0
    for pos in range(len(feasible)):
        if scores[pos] < scores[best_pos]:
            best_pos = pos
    best_idx = int(feasible[best_pos])
    chosen = thetas[best_idx]
    out_img = imgs[best_idx]
    outcome = AttackOutcome(
        theta=chosen,
        ssim=float(scores[best_pos]),
        delta_e=C.mean_delta_e(arr, out_img),
        fallback=(len(feasible) == 1),
        n_feasible=int(len(feasible)),
        n_candidates=len(thetas),
        label=base_label,
    )
    return out_img, outcome


def poison_dataset(spec: M.ModelSpec, weights, dataset: D.LabeledDataset,
                   grid: GridSpec) -> tuple[D.LabeledDataset, list[AttackOutcome]]:
    """Run the grid attack over every image; labels pass through untouched."""
    images = np.empty_like(dataset.images)
    outcomes: list[AttackOutcome] = []
    for i in range(len(dataset)):
        images[i], outcome = cpm_perturb(spec, weights, dataset.images[i], grid)
        outcomes.append(outcome)
    poisoned = D.LabeledDataset(images, dataset.labels.copy(), dataset.classes,
                                name=f"{dataset.name}+grid")
    return poisoned, outcomes


def summarize_outcomes(outcomes: list[AttackOutcome]) -> dict:
    """Aggregate stats the reports care about."""
    ssims = np.array([o.ssim for o in outcomes], dtype=np.float64)
    de = np.array([o.delta_e for o in outcomes], dtype=np.float64)
    fallbacks = np.array([o.fallback for o in outcomes])
    return {
        "n": len(outcomes),
        "ssim_mean": float(ssims.mean()),
        "ssim_std": float(ssims.std()),
        "ssim_p10": float(np.percentile(ssims, 10)),
        "ssim_p50": float(np.percentile(ssims, 50)),
        "ssim_p90": float(np.percentile(ssims, 90)),
        "frac_below_0.7": float((ssims < 0.7).mean()),
        "delta_e_mean": float(de.mean()),
        "fallback_rate": float(fallbacks.mean()),
        "attack_success_pct": float(100.0 * (~fallbacks).mean()),
    }


@dataclass(frozen=True)
class SkewSample:
    """Parameters one random-skew draw actually applied."""

    use_hue: bool
    use_saturation: bool
    use_channels: bool
    delta: float
    saturation: float
    alpha: tuple[float, float, float]


def random_skew(x, seed: int, scale: float = 1.0,
                hue_range: float = 1.0 / 12.0,
                sat_range: tuple[float, float] = (0.5, 1.5),
                chan_range: tuple[float, float] = (0.8, 1.2),
                ) -> tuple[np.ndarray, SkewSample]:
    """Model-blind recolor: a random non-empty subset of hue shift,
    saturation scale, and per-channel rescale, applied in that order.

    ``scale`` shrinks every range linearly toward the identity, which lets a
    caller match the perceptual strength of another attack.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    arr = np.asarray(x)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5CE11)))
    mask = int(rng.integers(1, 8))  # non-empty subset of three bits
    use_hue = bool(mask & 1)
    use_sat = bool(mask & 2)
    use_chan = bool(mask & 4)

    delta = 0.0
    sat = 1.0
    alpha = (1.0, 1.0, 1.0)
    out = arr
    if use_hue:
        delta = float(rng.uniform(-hue_range, hue_range)) * scale
        out = C.hue_shift(out, delta)
    if use_sat:
        sat = 1.0 + (float(rng.uniform(*sat_range)) - 1.0) * scale
        out = C.saturation_scale(out, sat)
    if use_chan:
        draws = rng.uniform(chan_range[0], chan_range[1], size=3)
        alpha = tuple(1.0 + (float(a) - 1.0) * scale for a in draws)
        out = C.channel_rescale(out, alpha)
    if out is arr:
        out = arr.copy()
    return out, SkewSample(use_hue, use_sat, use_chan, delta, sat, alpha)
