"""Fraudster-detection heads and the posterior-based defense machinery.

Two supervision schemes share one two-layer MLP head over the refined
user embedding (embedding + prediction-error summary):

- supervised cross-entropy against the observed labels, and
- an implicit-posterior loss against a per-user prior table, with the
  priors dynamically re-anchored once detection AUC clears a trigger.

Column convention everywhere: index 0 = fake, index 1 = normal, so
q[:, 0] is the anomaly score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractViolation, ValidationError

FAKE, NORMAL = 0, 1
PRIOR_CLAMP = 1e-3


@dataclass
class DetectorParams:
    """Two-layer head (d* -> hidden -> 2) with a soft-max temperature."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        for t in self.tensors():
            if not np.all(np.isfinite(t.values)):
                raise ValidationError("non-finite detector parameter")

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def clone(self):
        return DetectorParams(*(Tensor(t.values.copy(), requires_grad=True)
                                for t in self.tensors()), self.temperature)


@dataclass(frozen=True)
class DefenseConfig:
    temperature: float = 2.0
    p0: float = 0.01
    p1: float = 0.2
    a0: float = 0.8
    alpha: float = 0.05
    c1_init: float = 0.4
    c2_init: float = 0.85
    decay_step: float = 0.025
    c1_floor: float = 0.2
    c2_ceiling: float = 1.0

    def __post_init__(self):
        if not 0 < self.c1_init < self.c2_init <= 1:
            raise ValidationError(f"need 0 < c1 < c2 <= 1, got ({self.c1_init}, {self.c2_init})")
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0.5 < self.a0 < 1:
            raise ValidationError(f"a0 must be in (0.5, 1), got {self.a0}")


def init_detector(d_star, hidden=16, temperature=1.0, seed=0):
    rng = np.random.default_rng(seed)

    def glorot(shape):
        fi, fo = (shape if len(shape) == 2 else (shape[0], 1))
        s = np.sqrt(6.0 / (fi + fo))
        return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

    return DetectorParams(glorot((d_star, hidden)), glorot((hidden,)),
                          glorot((hidden, 2)), glorot((2,)), temperature)


# ---------------------------------------------------------------------------
# forward heads


def refined_embeddings(Z, edge_users, abs_errors, n_users):
    """Append mean and max training-prediction error to each user row.

    abs_errors is a Tensor of |r - r'| aligned with edge_users. Users
    without edges get (0, 0) appended. Output width is d + 2.
    """
    edge_users = np.asarray(edge_users, dtype=np.int64)
    deg = np.bincount(edge_users, minlength=n_users).astype(np.float64)
    inv = Tensor(np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0))
    mean_e = ag.segment_sum(abs_errors, edge_users, n_users) * inv
    max_e = ag.segment_max(abs_errors, edge_users, n_users)
    return ag.concat([Z, ag.reshape(mean_e, (n_users, 1)),
                      ag.reshape(max_e, (n_users, 1))], axis=1)


def refined_embedding(z_u, errors):
    """Single-user form: concat(z_u, mean error, max error)."""
    e = np.asarray(errors, dtype=np.float64)
    mean_e, max_e = (0.0, 0.0) if e.size == 0 else (float(e.mean()), float(e.max()))
    z = z_u.values if isinstance(z_u, Tensor) else np.asarray(z_u)
    return np.concatenate([z, [mean_e, max_e]])


def detect_forward(z_star, params):
    """Posterior table q = softmax(logits / T); column 0 is q(fake)."""
    h = ag.relu(ag.matmul(z_star, params.w1) + params.b1)
    logits = ag.matmul(h, params.w2) + params.b2
    return ag.softmax(logits, temperature=params.temperature)


def supervised_ce_loss(q, labels_fake):
    """Mean negative log-likelihood of the observed labels.

    labels_fake is a boolean/0-1 array, true where the user is labeled
    fake (column 0).
    """
    mask = np.asarray(labels_fake, dtype=np.float64)
    n = mask.shape[0]
    if q.shape != (n, 2):
        raise ContractViolation(f"posterior shape {q.shape} for {n} labels")
    picked = ag.slice_last(q, FAKE) * Tensor(mask) + ag.slice_last(q, NORMAL) * Tensor(1.0 - mask)
    return ag.scale(ag.reduce_sum(ag.log(ag.clamp_min(picked, 1e-300))), -1.0 / n)


# ---------------------------------------------------------------------------
# implicit-posterior machinery


def init_priors(labels_fake, p0=0.01, p1=0.2):
    """Label-anchored priors: fake -> [1-p0, p0], normal -> [p1, 1-p1]."""
    if not (0 < p0 < 0.5 and 0 < p1 < 0.5):
        raise ValidationError(f"p0, p1 must lie in (0, 0.5), got {p0}, {p1}")
    mask = np.asarray(labels_fake, dtype=bool)
    priors = np.empty((mask.shape[0], 2))
    priors[mask] = [1.0 - p0, p0]
    priors[~mask] = [p1, 1.0 - p1]
    return priors


def ip_loss(q, priors):
    """Sum over users and classes of q * log(class q-mass / prior).

    The class mass is clamped at 1e-12 before the log; zero q entries
    contribute zero. priors must be strictly positive.
    """
    p = np.asarray(priors, dtype=np.float64)
    if p.min() <= 0:
        raise ContractViolation(f"prior entries must be positive, min {p.min():g}")
    if q.shape != p.shape:
        raise ContractViolation(f"posterior shape {q.shape} vs prior shape {p.shape}")
    mass = ag.clamp_min(ag.reduce_sum(q, axis=0, keepdims=True), 1e-12)   # (1, 2)
    return ag.reduce_sum(q * (ag.log(mass) - Tensor(np.log(p))))


def adjust_labels(priors, q_fake, cfg, c1, c2):
    """Piecewise prior update driven by the posterior anomaly score.

    Confident-normal users (q(f) < c1) get pushed down, confident-fake
    users (q(f) > c2) pulled up, the middle band stays put. Results are
    clamped into [1e-3, 1-1e-3].
    """
    if not 0 < c1 < c2 <= 1:
        raise ValidationError(f"need 0 < c1 < c2 <= 1, got ({c1}, {c2})")
    p = np.asarray(priors, dtype=np.float64)
    qf = np.asarray(q_fake, dtype=np.float64)
    pf = p[:, FAKE].copy()
    a = cfg.alpha
    low = qf < c1
    high = qf > c2
    pf[low] = (1 - a) * pf[low] - a * (1.0 - qf[low])
    pf[high] = (1 - a) * pf[high] + a * qf[high]
    pf = np.clip(pf, PRIOR_CLAMP, 1.0 - PRIOR_CLAMP)
    out = np.stack([pf, 1.0 - pf], axis=1)
    return out


def decay_interval(c1, c2, cfg):
    """Widen the confident bands one step, clamped at the end points."""
    return (max(c1 - cfg.decay_step, cfg.c1_floor),
            min(c2 + cfg.decay_step, cfg.c2_ceiling))


# ---------------------------------------------------------------------------
# metrics and baselines


def auc(scores, labels_fake):
    """P(random fake outscores random normal), ties at 0.5 (rank form)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels_fake, dtype=bool)
    n_f, n_n = int(y.sum()), int((~y).sum())
    if n_f == 0 or n_n == 0:
        raise ValidationError("auc needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty_like(s)
    ranks[order] = np.arange(1, s.size + 1, dtype=np.float64)
    # average ranks over tied values
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    r_fake = ranks[y].sum()
    return float((r_fake - n_f * (n_f + 1) / 2.0) / (n_f * n_n))


def adversarial_training_step(tensors, loss_fn, lr, noise_scale):
    """Gradient step evaluated at parameters perturbed along the gradient.

    loss_fn() computes the scalar loss from the current tensor values
    under an active tape. The perturbation is noise_scale times the
    globally normalized gradient at the unperturbed point; noise_scale 0
    reduces to a plain step. Returns the perturbed-point loss value.
    """
    tensors = list(tensors)
    with ag.Tape() as tape:
        loss = loss_fn()
    grads = ag.backward(tape, loss)
    gs = [grads.get(t, np.zeros_like(t.values)) for t in tensors]
    norm = np.sqrt(sum(float((g**2).sum()) for g in gs))
    originals = [t.values for t in tensors]
    if noise_scale != 0.0 and norm > 0:
        for t, g in zip(tensors, gs):
            t.values = t.values + noise_scale * g / norm
    with ag.Tape() as tape2:
        loss2 = loss_fn()
    grads2 = ag.backward(tape2, loss2)
    for t, orig in zip(tensors, originals):
        g = grads2.get(t, np.zeros_like(orig))
        t.values = orig - lr * g
    return float(loss2.values)
