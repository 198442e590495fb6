"""Label-only estimate of a point's L2 distance to the decision boundary.

HopSkipJump-style walk: start from a misclassified blend of the point with
uniform noise, project onto the boundary by bisection, then repeatedly
estimate the boundary normal from label queries, step along it with a
geometric step schedule and re-project towards the original point.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._util import ContractError, sample_seed, substream

MAX_BISECTIONS = 64
MAX_STEP_SHRINKS = 30


@dataclass(frozen=True)
class BoundarySearchConfig:
    init_trials: int = 40
    blend_steps: int = 20
    max_iters: int = 30
    grad_queries: int = 100
    step_init: float = 1.0
    step_decay: float = 0.5
    bin_search_tol: float = 1e-3
    seed: int = 0
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        counts = (self.init_trials, self.blend_steps, self.max_iters, self.grad_queries)
        if min(counts) < 1:
            raise ContractError("boundary search counts must be positive")
        if not 0 < self.step_decay < 1:
            raise ContractError("step_decay must be in (0, 1)")
        if not self.bin_search_tol > 0 or not self.step_init > 0:
            raise ContractError("bin_search_tol and step_init must be > 0")
        lo, hi = self.domain
        if not lo < hi:
            raise ContractError("domain must be (low, high) with low < high")
        object.__setattr__(self, "domain", (float(lo), float(hi)))

    def to_json(self):
        d = asdict(self)
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "domain" in d:
            d["domain"] = tuple(d["domain"])
        return cls(**d)


class _Walker:
    def __init__(self, target, x, label, config, rng):
        self.target = target
        self.x = x
        self.label = label
        self.cfg = config
        self.rng = rng
        self.lo, self.hi = config.domain
        self.queries = 0

    def adversarial(self, P):
        P = np.atleast_2d(P)
        self.queries += len(P)
        return self.target.predict_labels(P) != self.label

    def start_point(self):
        alphas = np.arange(1, self.cfg.blend_steps + 1) / self.cfg.blend_steps
        for _ in range(self.cfg.init_trials):
            noise = self.rng.uniform(self.lo, self.hi, size=self.x.shape)
            blends = (1.0 - alphas[:, None]) * self.x + alphas[:, None] * noise
            hit = np.flatnonzero(self.adversarial(blends))
            if hit.size:
                return blends[hit[0]]
        return None

    def project(self, adv):
        """Bisect [x, adv] to the boundary; returns the adversarial-side end."""
        t_lo, t_hi = 0.0, 1.0
        seg = adv - self.x
        for _ in range(MAX_BISECTIONS):
            if t_hi - t_lo <= self.cfg.bin_search_tol * t_hi:
                break
            mid = 0.5 * (t_lo + t_hi)
            if self.adversarial(self.x + mid * seg)[0]:
                t_hi = mid
            else:
                t_lo = mid
        return self.x + t_hi * seg

    def normal(self, xb, dist):
        d = self.x.size
        delta = dist / d
        u = self.rng.standard_normal((self.cfg.grad_queries, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        probes = np.clip(xb + delta * u, self.lo, self.hi)
        u = (probes - xb) / delta
        phi = np.where(self.adversarial(probes), 1.0, -1.0)
        mean = phi.mean()
        if abs(mean) < 1.0:
            phi = phi - mean
        v = phi @ u
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else None

    def run(self):
        start = self.start_point()
        if start is None:
            return math.inf
        xb = self.project(start)
        dist = best = float(np.linalg.norm(xb - self.x))
        for t in range(1, self.cfg.max_iters + 1):
            if dist == 0.0:
                break
            v = self.normal(xb, dist)
            if v is None:
                break
            step = self.cfg.step_init * dist / math.sqrt(t)
            cand = None
            for _ in range(MAX_STEP_SHRINKS):
                trial = np.clip(xb + step * v, self.lo, self.hi)
                if self.adversarial(trial)[0]:
                    cand = trial
                    break
                step *= self.cfg.step_decay
            if cand is None:
                continue
            xb = self.project(cand)
            dist = float(np.linalg.norm(xb - self.x))
            best = min(best, dist)
        return best


def estimate_boundary_distance(target, x, config: BoundarySearchConfig = BoundarySearchConfig(), *,
                               label=None, sample_id=None) -> float:
    """L2 distance from ``x`` to the nearest point the target labels differently.

    Only ``target.predict_labels`` is queried. The walk starts from the
    target's own label for ``x``; if a reference ``label`` is supplied and
    the target already disagrees with it, the distance is 0. Returns
    ``math.inf`` when no misclassified starting blend is found within the
    budget. Randomness is seeded from ``config.seed`` and ``sample_id``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ContractError("features must be finite")
    predicted = int(target.predict_labels(x[None, :])[0])
    if label is not None and predicted != int(label):
        return 0.0
    if sample_id is None:
        rng = substream(config.seed, "boundary")
    else:
        rng = np.random.default_rng(sample_seed(config.seed, sample_id))
    return _Walker(target, x, predicted, config, rng).run()


def boundary_distances(target, dataset, config: BoundarySearchConfig = BoundarySearchConfig()) -> np.ndarray:
    """Per-sample distances, each seeded from its sample_id."""
    return np.array(
        [
            estimate_boundary_distance(target, x, config, sample_id=sid)
            for sid, x in zip(dataset.sample_ids, dataset.features)
        ],
        dtype=np.float64,
    )
