"""Cross-agent Gaussian fusion.

Every ego Gaussian gathers received Gaussians inside a radius-rho ball,
turns each (ego, neighbor) pair into a 45-dim feature, maps it through a
small MLP into a refinement proposal, pools proposals across the
neighborhood (uniform weights or a learned softmax), and applies the
pooled update; semantics are blended with a confidence weight so a
confidently labeled ego Gaussian resists being overwritten. Gaussians
with no neighbors pass through bit-for-bit unchanged.

The forward pass can record a tape from which `fusion_backward` produces
analytic parameter gradients; `learn` drives that during training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from gsfusion.core import (
    NUM_CLASSES,
    GaussianSet,
    SemanticGaussian,
    _canonical_sign,
)

FPRM_MAGIC = b"FPRM"
FPRM_VERSION = 1

HIDDEN_DIM = 128
PROJ_DIM = 32
SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class FusionConfig:
    radius_rho: float = 0.4
    pooling: str = "attention"          # "mean" | "attention"
    epsilon: float = 1e-8
    max_neighbors: int = 64

    def __post_init__(self):
        if self.radius_rho <= 0:
            raise ValueError("radius_rho must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.pooling not in ("mean", "attention"):
            raise ValueError("pooling must be 'mean' or 'attention'")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be at least 1")


def ego_feature_dim(num_classes: int = NUM_CLASSES) -> int:
    return 11 + num_classes            # mean 3 + scale 3 + quat 4 + opacity 1 + classes


def rel_feature_dim(num_classes: int = NUM_CLASSES) -> int:
    return 8 + num_classes             # dmean 3 + dscale 3 + |cos| 1 + opacity 1 + classes


def pair_feature_dim(num_classes: int = NUM_CLASSES) -> int:
    return ego_feature_dim(num_classes) + rel_feature_dim(num_classes)


@dataclass
class FusionParams:
    """Learned state: proposal MLP weights plus attention projections."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    q_proj: np.ndarray
    k_proj: np.ndarray

    _ORDER = ("w1", "b1", "w2", "b2", "w3", "b3", "q_proj", "k_proj")

    def __post_init__(self):
        for name in self._ORDER:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def validate(self) -> None:
        for name in self._ORDER:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in FusionParams.{name}")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self._ORDER}

    def copy(self) -> "FusionParams":
        return FusionParams(**{k: v.copy() for k, v in self.as_dict().items()})

    @property
    def num_classes(self) -> int:
        return self.w3.shape[0] - 11

    @staticmethod
    def zeros(num_classes: int = NUM_CLASSES, hidden: int = HIDDEN_DIM,
              d_proj: int = PROJ_DIM) -> "FusionParams":
        zin = pair_feature_dim(num_classes)
        out = ego_feature_dim(num_classes)
        return FusionParams(
            np.zeros((hidden, zin)), np.zeros(hidden),
            np.zeros((hidden, hidden)), np.zeros(hidden),
            np.zeros((out, hidden)), np.zeros(out),
            np.zeros((d_proj, ego_feature_dim(num_classes))),
            np.zeros((d_proj, rel_feature_dim(num_classes))),
        )

    @staticmethod
    def init(seed: int = 0, num_classes: int = NUM_CLASSES, hidden: int = HIDDEN_DIM,
             d_proj: int = PROJ_DIM) -> "FusionParams":
        """He-initialized hidden layers with per-column input scaling (raw
        positions span tens of meters while class weights are order one),
        a small output layer, and output biases that make untrained
        proposals mild: thin mid-range scales, high opacity, low semantic
        mass, near-identity rotation."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF05]))
        zin = pair_feature_dim(num_classes)
        out = ego_feature_dim(num_classes)
        col_scale = 1.0 / _feature_spans(num_classes)
        p = FusionParams(
            rng.normal(0.0, np.sqrt(2.0 / zin), (hidden, zin)) * col_scale,
            np.zeros(hidden),
            rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden)), np.zeros(hidden),
            rng.normal(0.0, 0.01, (out, hidden)), np.zeros(out),
            rng.normal(0.0, 1.0 / np.sqrt(ego_feature_dim(num_classes)),
                       (d_proj, ego_feature_dim(num_classes)))
            * col_scale[:ego_feature_dim(num_classes)],
            rng.normal(0.0, 1.0 / np.sqrt(rel_feature_dim(num_classes)),
                       (d_proj, rel_feature_dim(num_classes)))
            * col_scale[ego_feature_dim(num_classes):],
        )
        p.b3[3:5] = _inv_softplus(0.3)       # lateral scale, flat-surface profile
        p.b3[5] = _inv_softplus(0.12)        # vertical scale
        p.b3[10] = _logit(0.95)              # opacity proposals start confident
        p.b3[11:] = _inv_softplus(0.05)      # semantic proposals start low-mass
        return p


def _feature_spans(num_classes: int) -> np.ndarray:
    """Typical magnitude of each pair-feature column, used to balance the
    input weighting at initialization."""
    spans = np.ones(pair_feature_dim(num_classes))
    spans[0:3] = 20.0                        # ego mean, meters
    spans[3:6] = 0.5                         # ego scale
    e = ego_feature_dim(num_classes)
    spans[e:e + 3] = 0.5                     # relative mean, bounded by rho
    spans[e + 3:e + 6] = 0.5                 # relative scale
    return spans


@dataclass
class Proposal:
    """One pooled (or per-pair) refinement proposal."""

    delta_mean: np.ndarray
    scale_star: np.ndarray
    rot_star: np.ndarray
    opacity_star: float
    sem_star: np.ndarray


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# neighborhood search
# ---------------------------------------------------------------------------

class HashGrid:
    """Uniform spatial hash with cell size equal to the query radius, so a
    radius query only ever touches the 27 surrounding cells."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        self.table: dict[tuple[int, int, int], list[int]] = {}
        keys = np.floor(self.points / self.cell).astype(np.int64)
        for i in range(len(self.points)):
            self.table.setdefault(tuple(keys[i]), []).append(i)

    def query(self, x: np.ndarray, radius: float, cap: int | None = None) -> np.ndarray:
        """Indices with ||p - x|| <= radius, nearest first, ties by index,
        truncated to `cap` when given. radius must not exceed the cell size."""
        if radius > self.cell + 1e-12:
            raise ValueError("query radius exceeds hash cell size")
        cx, cy, cz = np.floor(np.asarray(x) / self.cell).astype(np.int64)
        cand: list[int] = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    cand.extend(self.table.get((cx + dx, cy + dy, cz + dz), ()))
        if not cand:
            return np.empty(0, dtype=np.int64)
        cand_arr = np.array(cand, dtype=np.int64)
        d = np.linalg.norm(self.points[cand_arr] - x, axis=1)
        keep = d <= radius
        cand_arr = cand_arr[keep]
        d = d[keep]
        order = np.lexsort((cand_arr, d))
        cand_arr = cand_arr[order]
        if cap is not None and cand_arr.size > cap:
            cand_arr = cand_arr[:cap]
        return cand_arr


def neighborhood(ego: SemanticGaussian, received: GaussianSet, rho: float,
                 max_neighbors: int | None = None) -> GaussianSet:
    """Received Gaussians within the closed radius-rho ball of the ego mean,
    truncated to the nearest `max_neighbors` when the ball holds more."""
    if len(received) == 0:
        return received.copy()
    grid = HashGrid(received.means, rho)
    idx = grid.query(ego.mean, rho, max_neighbors)
    return received.take(np.sort(idx))


def neighborhood_indices(ego_mean: np.ndarray, received_means: np.ndarray, rho: float,
                         max_neighbors: int | None = None) -> np.ndarray:
    grid = HashGrid(received_means, rho)
    return grid.query(np.asarray(ego_mean, dtype=np.float64), rho, max_neighbors)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def ego_features(gs: GaussianSet) -> np.ndarray:
    """Per-Gaussian descriptor [mean | scale | quat | opacity | semantics]."""
    return np.concatenate(
        [gs.means, gs.scales, gs.rotations, gs.opacities[:, None], gs.semantics], axis=1
    )


def rel_features(ego: GaussianSet, ego_idx: np.ndarray, nbr: GaussianSet,
                 nbr_idx: np.ndarray) -> np.ndarray:
    """Per-pair relative cue [dmean | dscale | |quat cosine| | opacity | semantics]."""
    dm = nbr.means[nbr_idx] - ego.means[ego_idx]
    ds = nbr.scales[nbr_idx] - ego.scales[ego_idx]
    cos = np.abs(np.sum(nbr.rotations[nbr_idx] * ego.rotations[ego_idx], axis=1))
    return np.concatenate(
        [dm, ds, cos[:, None], nbr.opacities[nbr_idx][:, None], nbr.semantics[nbr_idx]],
        axis=1,
    )


def pairwise_features(ego: SemanticGaussian, nbr: SemanticGaussian) -> np.ndarray:
    """The 45-dim pair feature (for the default class count): ego block
    followed by the relative block. The quaternion enters the relative
    block as a sign-invariant cosine."""
    e = GaussianSet.from_gaussians([ego])
    n = GaussianSet.from_gaussians([nbr])
    z = np.concatenate([ego_features(e), rel_features(e, np.array([0]), n, np.array([0]))],
                       axis=1)
    return z[0]


# ---------------------------------------------------------------------------
# proposal network
# ---------------------------------------------------------------------------

def _mlp_forward(z: np.ndarray, params: FusionParams):
    h1p = z @ params.w1.T + params.b1
    h1 = np.maximum(h1p, 0.0)
    h2p = h1 @ params.w2.T + params.b2
    h2 = np.maximum(h2p, 0.0)
    raw = h2 @ params.w3.T + params.b3
    return raw, (h1p, h1, h2p, h2)


def _activate(raw: np.ndarray, num_classes: int):
    """Map raw MLP outputs onto valid proposal fields."""
    dm = raw[:, 0:3]
    s = _softplus(raw[:, 3:6]) + SCALE_FLOOR
    rraw = raw[:, 6:10].copy()
    rraw[:, 0] += 1.0                     # offset keeps the norm away from zero
    rnorm = np.linalg.norm(rraw, axis=1)
    r = rraw / rnorm[:, None]
    a = _sigmoid(raw[:, 10])
    c = _softplus(raw[:, 11:11 + num_classes])
    return dm, s, r, a, c, (rraw, rnorm)


def propose(z: np.ndarray, params: FusionParams) -> Proposal:
    """Run one pair feature through the proposal network."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite pair feature")
    params.validate()
    raw, _ = _mlp_forward(z[None, :], params)
    num_classes = params.num_classes
    dm, s, r, a, c, _ = _activate(raw, num_classes)
    return Proposal(dm[0], s[0], r[0], float(a[0]), c[0])


# ---------------------------------------------------------------------------
# pooling and update
# ---------------------------------------------------------------------------

def _segment_softmax(logits: np.ndarray, starts: np.ndarray, counts: np.ndarray):
    seg_max = np.maximum.reduceat(logits, starts)
    ex = np.exp(logits - np.repeat(seg_max, counts))
    seg_sum = np.add.reduceat(ex, starts)
    return ex / np.repeat(seg_sum, counts)


def _pool_segments(w, dm, s, r, a, c, starts, counts):
    """Weighted per-segment sums of proposal fields; quaternions are sign
    aligned to each segment's first proposal before summing."""
    first = np.repeat(starts, counts)
    sigma = np.where(np.sum(r * r[first], axis=1) >= 0.0, 1.0, -1.0)
    wc = w[:, None]
    pooled_dm = np.add.reduceat(wc * dm, starts)
    pooled_s = np.add.reduceat(wc * s, starts)
    pooled_a = np.add.reduceat(w * a, starts)
    pooled_c = np.add.reduceat(wc * c, starts)
    rbar_raw = np.add.reduceat((w * sigma)[:, None] * r, starts)
    rbar_norm = np.linalg.norm(rbar_raw, axis=1)
    rbar = rbar_raw / rbar_norm[:, None]
    return pooled_dm, pooled_s, pooled_a, pooled_c, rbar_raw, rbar_norm, rbar, sigma


def pool(proposals: list[Proposal], weights_mode: str, ego_feat: np.ndarray,
         rel_feats: list[np.ndarray], params: FusionParams) -> Proposal:
    """Average proposals across one neighborhood.

    Mean mode uses uniform weights; attention mode uses a softmax over
    projected ego/relative features. Raises ValueError on an empty list
    (the caller keeps the ego Gaussian unchanged in that case).
    """
    if not proposals:
        raise ValueError("empty proposal list: empty neighborhood")
    n = len(proposals)
    dm = np.stack([p.delta_mean for p in proposals])
    s = np.stack([p.scale_star for p in proposals])
    r = np.stack([p.rot_star for p in proposals])
    a = np.array([p.opacity_star for p in proposals])
    c = np.stack([p.sem_star for p in proposals])
    starts = np.array([0])
    counts = np.array([n])
    if weights_mode == "mean":
        w = np.full(n, 1.0 / n)
    elif weights_mode == "attention":
        f = np.stack(rel_feats)
        logits = (f @ params.k_proj.T) @ (params.q_proj @ np.asarray(ego_feat))
        logits = logits / np.sqrt(params.q_proj.shape[0])
        w = _segment_softmax(logits, starts, counts)
    else:
        raise ValueError("weights_mode must be 'mean' or 'attention'")
    pooled_dm, pooled_s, pooled_a, pooled_c, _, _, rbar, _ = _pool_segments(
        w, dm, s, r, a, c, starts, counts)
    return Proposal(pooled_dm[0], pooled_s[0], rbar[0], float(pooled_a[0]), pooled_c[0])


def confidence(v: np.ndarray, epsilon: float = 1e-8) -> float:
    """Peak of the (epsilon-guarded) normalized class weights."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.max(v) / (np.sum(v) + epsilon))


def update_ego(ego: SemanticGaussian, pooled: Proposal,
               epsilon: float = 1e-8) -> SemanticGaussian:
    """Apply a pooled proposal: residual mean shift, scale/rotation/opacity
    replacement, and a confidence-weighted semantic blend."""
    from gsfusion.core import canonicalize_quaternion

    alpha = confidence(ego.semantics, epsilon) / (
        confidence(ego.semantics, epsilon) + confidence(pooled.sem_star, epsilon))
    sem = alpha * ego.semantics + (1.0 - alpha) * pooled.sem_star
    return SemanticGaussian(
        mean=ego.mean + pooled.delta_mean,
        scale=pooled.scale_star,
        rotation=canonicalize_quaternion(pooled.rot_star),
        opacity=float(pooled.opacity_star),
        semantics=sem,
    )


# ---------------------------------------------------------------------------
# whole-scene fusion with a backward tape
# ---------------------------------------------------------------------------

@dataclass
class FusionTape:
    """Everything the analytic backward needs from one forward pass."""

    params: FusionParams
    pooling: str
    epsilon: float
    n_ego: int
    num_classes: int
    seg_egos: np.ndarray        # ego rows that had non-empty neighborhoods
    starts: np.ndarray
    counts: np.ndarray
    z: np.ndarray
    h1p: np.ndarray
    h1: np.ndarray
    h2p: np.ndarray
    h2: np.ndarray
    raw: np.ndarray
    dm: np.ndarray
    s: np.ndarray
    r: np.ndarray
    a: np.ndarray
    c: np.ndarray
    rraw: np.ndarray
    rnorm: np.ndarray
    w: np.ndarray
    sigma: np.ndarray
    e_feats: np.ndarray         # per-segment ego features
    f_rel: np.ndarray           # per-pair relative features
    pooled_c: np.ndarray
    rbar_raw: np.ndarray
    rbar_norm: np.ndarray
    rbar: np.ndarray
    canon_sign: np.ndarray
    alpha: np.ndarray
    conf_ego: np.ndarray
    conf_pool: np.ndarray
    ego_sem: np.ndarray


def _build_pairs(ego_means: np.ndarray, pool_means: np.ndarray, rho: float,
                 max_neighbors: int):
    grid = HashGrid(pool_means, rho)
    seg_egos, pair_j, counts = [], [], []
    for k in range(ego_means.shape[0]):
        idx = grid.query(ego_means[k], rho, max_neighbors)
        if idx.size:
            seg_egos.append(k)
            counts.append(idx.size)
            pair_j.append(idx)
    if not seg_egos:
        return (np.empty(0, dtype=np.int64),) * 4
    counts = np.array(counts, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.array(seg_egos, dtype=np.int64), np.concatenate(pair_j), starts, counts


def fuse_scene(ego_set: GaussianSet, received_sets: list[GaussianSet],
               cfg: FusionConfig, params: FusionParams,
               record: bool = False):
    """Refine every ego Gaussian from its radius-rho neighborhood of
    received Gaussians. Cardinality is preserved; rows without neighbors
    are returned unchanged. With record=True also returns a FusionTape
    (None when nothing was fused) for the analytic backward."""
    params.validate()
    fused = ego_set.copy()
    pool_set = GaussianSet.concat([s for s in received_sets if len(s)])
    if len(ego_set) == 0 or len(pool_set) == 0:
        return (fused, None) if record else fused

    seg_egos, pair_j, starts, counts = _build_pairs(
        ego_set.means, pool_set.means, cfg.radius_rho, cfg.max_neighbors)
    if seg_egos.size == 0:
        return (fused, None) if record else fused
    pair_e = np.repeat(seg_egos, counts)

    num_classes = ego_set.num_classes
    e_all = ego_features(ego_set)
    f_rel = rel_features(ego_set, pair_e, pool_set, pair_j)
    z = np.concatenate([e_all[pair_e], f_rel], axis=1)

    raw, (h1p, h1, h2p, h2) = _mlp_forward(z, params)
    dm, s, r, a, c, (rraw, rnorm) = _activate(raw, num_classes)

    if cfg.pooling == "mean":
        w = np.repeat(1.0 / counts, counts)
    else:
        e_feats = e_all[seg_egos]
        qe = e_feats @ params.q_proj.T                     # (S, d)
        kf = f_rel @ params.k_proj.T                       # (P, d)
        logits = np.sum(np.repeat(qe, counts, axis=0) * kf, axis=1)
        logits = logits / np.sqrt(params.q_proj.shape[0])
        w = _segment_softmax(logits, starts, counts)

    pooled_dm, pooled_s, pooled_a, pooled_c, rbar_raw, rbar_norm, rbar, sigma = \
        _pool_segments(w, dm, s, r, a, c, starts, counts)

    canon_sign = _canonical_sign(rbar)[:, 0]
    rhat = rbar * canon_sign[:, None]

    ego_sem = ego_set.semantics[seg_egos]
    eps = cfg.epsilon
    conf_ego = np.max(ego_sem, axis=1) / (np.sum(ego_sem, axis=1) + eps)
    conf_pool = np.max(pooled_c, axis=1) / (np.sum(pooled_c, axis=1) + eps)
    alpha = conf_ego / (conf_ego + conf_pool)
    sem_hat = alpha[:, None] * ego_sem + (1.0 - alpha)[:, None] * pooled_c

    fused.means[seg_egos] = ego_set.means[seg_egos] + pooled_dm
    fused.scales[seg_egos] = pooled_s
    fused.rotations[seg_egos] = rhat
    fused.opacities[seg_egos] = pooled_a
    fused.semantics[seg_egos] = sem_hat

    if not record:
        return fused
    tape = FusionTape(
        params=params, pooling=cfg.pooling, epsilon=eps, n_ego=len(ego_set),
        num_classes=num_classes, seg_egos=seg_egos, starts=starts, counts=counts,
        z=z, h1p=h1p, h1=h1, h2p=h2p, h2=h2, raw=raw,
        dm=dm, s=s, r=r, a=a, c=c, rraw=rraw, rnorm=rnorm, w=w, sigma=sigma,
        e_feats=e_all[seg_egos], f_rel=f_rel,
        pooled_c=pooled_c, rbar_raw=rbar_raw, rbar_norm=rbar_norm, rbar=rbar,
        canon_sign=canon_sign, alpha=alpha, conf_ego=conf_ego, conf_pool=conf_pool,
        ego_sem=ego_sem,
    )
    return fused, tape


def fusion_backward(tape: FusionTape, grad_fused: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Map loss gradients w.r.t. the fused Gaussian fields back onto the
    FusionParams tensors. Input Gaussians are treated as constants."""
    p = tape.params
    grads = {k: np.zeros_like(v) for k, v in p.as_dict().items()}
    seg = tape.seg_egos
    starts, counts = tape.starts, tape.counts
    rep = lambda x: np.repeat(x, counts, axis=0)

    d_pooled_dm = grad_fused["means"][seg]
    d_pooled_s = grad_fused["scales"][seg]
    d_rhat = grad_fused["rotations"][seg]
    d_pooled_a = grad_fused["opacities"][seg]
    d_sem_hat = grad_fused["semantics"][seg]

    # semantic blend: sem_hat = alpha * ego + (1 - alpha) * pooled_c
    d_alpha = np.sum(d_sem_hat * (tape.ego_sem - tape.pooled_c), axis=1)
    d_pooled_c = (1.0 - tape.alpha)[:, None] * d_sem_hat
    denom = tape.conf_ego + tape.conf_pool
    d_conf_pool = d_alpha * (-tape.conf_ego / denom**2)
    ssum = np.sum(tape.pooled_c, axis=1) + tape.epsilon
    kstar = np.argmax(tape.pooled_c, axis=1)
    d_pooled_c += d_conf_pool[:, None] * (-np.max(tape.pooled_c, axis=1) / ssum**2)[:, None]
    d_pooled_c[np.arange(seg.size), kstar] += d_conf_pool / ssum

    # canonical sign then the pooled-quaternion normalization
    d_rbar = d_rhat * tape.canon_sign[:, None]
    dot = np.sum(tape.rbar * d_rbar, axis=1)
    d_rbar_raw = (d_rbar - tape.rbar * dot[:, None]) / tape.rbar_norm[:, None]

    # per-pair shares of the pooled sums
    d_w = np.sum(rep(d_pooled_dm) * tape.dm, axis=1)
    d_dm = rep(d_pooled_dm) * tape.w[:, None]
    d_w += np.sum(rep(d_pooled_s) * tape.s, axis=1)
    d_s = rep(d_pooled_s) * tape.w[:, None]
    d_w += rep(d_pooled_a) * tape.a
    d_a = rep(d_pooled_a) * tape.w
    d_w += np.sum(rep(d_pooled_c) * tape.c, axis=1)
    d_c = rep(d_pooled_c) * tape.w[:, None]
    d_w += tape.sigma * np.sum(rep(d_rbar_raw) * tape.r, axis=1)
    d_r = (tape.w * tape.sigma)[:, None] * rep(d_rbar_raw)

    # attention softmax and projection gradients
    if tape.pooling == "attention":
        wdw = tape.w * d_w
        seg_wdw = np.add.reduceat(wdw, starts)
        d_logits = wdw - tape.w * rep(seg_wdw)
        scale = 1.0 / np.sqrt(p.q_proj.shape[0])
        d_logits = d_logits * scale
        qe = tape.e_feats @ p.q_proj.T
        kf = tape.f_rel @ p.k_proj.T
        d_qe = np.add.reduceat(d_logits[:, None] * kf, starts)
        d_kf = d_logits[:, None] * rep(qe)
        grads["q_proj"] = d_qe.T @ tape.e_feats
        grads["k_proj"] = d_kf.T @ tape.f_rel

    # activation maps back to raw MLP outputs
    d_raw = np.zeros_like(tape.raw)
    d_raw[:, 0:3] = d_dm
    d_raw[:, 3:6] = d_s * _sigmoid(tape.raw[:, 3:6])
    rdot = np.sum(tape.r * d_r, axis=1)
    d_raw[:, 6:10] = (d_r - tape.r * rdot[:, None]) / tape.rnorm[:, None]
    d_raw[:, 10] = d_a * tape.a * (1.0 - tape.a)
    d_raw[:, 11:] = d_c * _sigmoid(tape.raw[:, 11:])

    # MLP backward
    grads["w3"] = d_raw.T @ tape.h2
    grads["b3"] = d_raw.sum(axis=0)
    d_h2 = (d_raw @ p.w3) * (tape.h2p > 0.0)
    grads["w2"] = d_h2.T @ tape.h1
    grads["b2"] = d_h2.sum(axis=0)
    d_h1 = (d_h2 @ p.w2) * (tape.h1p > 0.0)
    grads["w1"] = d_h1.T @ tape.z
    grads["b1"] = d_h1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# FPRM parameter files
# ---------------------------------------------------------------------------

def _pack_tensors(tensors: list[np.ndarray]) -> bytes:
    out = [struct.pack("<4sII", FPRM_MAGIC, FPRM_VERSION, len(tensors))]
    for t in tensors:
        mat = np.atleast_2d(np.asarray(t, dtype=np.float64))
        if t.ndim == 1:
            mat = mat.T                        # vectors stored as (n, 1)
        rows, cols = mat.shape
        out.append(struct.pack("<II", rows, cols))
        out.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    return b"".join(out)


def _unpack_tensors(data: bytes) -> list[np.ndarray]:
    if len(data) < 12:
        raise ValueError("FPRM data shorter than header")
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != FPRM_MAGIC:
        raise ValueError("bad FPRM magic")
    if version != FPRM_VERSION:
        raise ValueError(f"unsupported FPRM version {version}")
    offset = 12
    tensors = []
    for _ in range(count):
        if offset + 8 > len(data):
            raise ValueError("truncated FPRM tensor header")
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = rows * cols * 4
        if offset + nbytes > len(data):
            raise ValueError("truncated FPRM tensor payload")
        mat = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        tensors.append(mat.astype(np.float64).reshape(rows, cols))
        offset += nbytes
    if offset != len(data):
        raise ValueError("trailing bytes after FPRM tensors")
    return tensors


def save_params(params: FusionParams, path) -> None:
    tensors = [getattr(params, name) for name in FusionParams._ORDER]
    with open(path, "wb") as f:
        f.write(_pack_tensors(tensors))


def load_params(path) -> FusionParams:
    with open(path, "rb") as f:
        tensors = _unpack_tensors(f.read())
    if len(tensors) != 8:
        raise ValueError(f"expected 8 tensors for FusionParams, found {len(tensors)}")
    fields = {}
    for name, t in zip(FusionParams._ORDER, tensors):
        fields[name] = t[:, 0] if name.startswith("b") else t
    params = FusionParams(**fields)
    params.validate()
    return params
