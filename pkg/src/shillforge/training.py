"""Joint training loops: recommender plus detector under one tape.

The Trainer owns both parameter sets and a supervision mode:

- "graphrfi": detector supervised with cross-entropy on observed labels
- "pdr": detector supervised through the implicit-posterior loss against
  a prior table, with dynamic label adjustment once holdout AUC clears
  the trigger threshold
- "plain": no detector; rating loss with unit weights

Per-user anomaly scores are logged once per epoch; the attack loop
drives single steps directly to record parameter trajectories.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import detect as dt
from . import recmodel as rm
from .autograd import Tensor
from .errors import TrainingError, ValidationError

MODES = ("plain", "graphrfi", "pdr")


def holdout_users(labels_fake, frac=0.1, seed=0):
    """Stratified fixed subset of users for the detection-AUC signal."""
    y = np.asarray(labels_fake, dtype=bool)
    rng = np.random.default_rng(seed)
    picked = []
    for cls in (True, False):
        pool = np.nonzero(y == cls)[0]
        if pool.size == 0:
            return np.zeros(0, dtype=np.int64)  # AUC undefined without both classes
        take = max(1, int(np.floor(frac * pool.size + 0.5)))
        picked.append(rng.choice(pool, size=min(take, pool.size), replace=False))
    return np.sort(np.concatenate(picked))


class Trainer:
    """Full-batch joint training on a discrete or relaxed graph."""

    def __init__(self, graph, rec_params, det_params=None, mode="graphrfi",
                 labels_fake=None, defense_cfg=None, features=None,
                 holdout_frac=0.1, seed=0, adv_noise=0.0, adv_pretrain_epochs=0):
        if mode not in MODES:
            raise ValidationError(f"unknown training mode {mode!r}")
        self.graph = graph
        self.rec = rec_params
        self.det = det_params
        self.mode = mode
        self.cfg = defense_cfg or dt.DefenseConfig()
        self.features = features
        self.injected_features = None
        self.adv_noise = float(adv_noise)
        self.adv_pretrain_epochs = int(adv_pretrain_epochs)

        relaxed = isinstance(graph, rm.RelaxedGraph)
        base = graph.base if relaxed else graph
        self.base = base
        self.n_total = base.n_users + (graph.n_injected if relaxed else 0)
        self.relaxed = relaxed

        if mode != "plain":
            if det_params is None:
                raise ValidationError(f"mode {mode!r} needs detector parameters")
            if labels_fake is None:
                raise ValidationError(f"mode {mode!r} needs observed labels")
            self.labels_fake = np.asarray(labels_fake, dtype=bool)
            if self.labels_fake.shape[0] != self.n_total:
                raise ValidationError(
                    f"{self.labels_fake.shape[0]} labels for {self.n_total} users")
            self.holdout = holdout_users(self.labels_fake, holdout_frac, seed)
        else:
            self.labels_fake = None
            self.holdout = np.zeros(0, dtype=np.int64)

        self.priors = (dt.init_priors(self.labels_fake, self.cfg.p0, self.cfg.p1)
                       if mode == "pdr" else None)
        self.c1, self.c2 = self.cfg.c1_init, self.cfg.c2_init
        self.triggered = False
        self.score_log = []      # per epoch: np.ndarray of q(fake) per user
        self.auc_log = []        # per epoch: holdout AUC or None
        self.loss_log = []

        if relaxed:
            self.injected_features = rm.relaxed_injected_features(graph)

    # --- forward pieces -----------------------------------------------------

    def _error_edges(self, Z, H):
        """(user index array, per-edge abs error Tensor) over all rated pairs."""
        base, graph = self.base, self.graph
        users = base.edge_users
        parts = []
        if base.n_edges:
            r = rm.predict_edges(Z, H, self.rec, base.edge_users, base.edge_items, base.L)
            parts.append(ag.absolute(r - Tensor(base.edge_ratings.astype(np.float64))))
        if self.relaxed and graph.n_injected and graph.candidates.size:
            p, k = graph.n_injected, graph.candidates.size
            iu = np.repeat(np.arange(p) + base.n_users, k)
            iv = np.tile(graph.candidates, p)
            r = rm.predict_edges(Z, H, self.rec, iu, iv, base.L)
            r_mat = ag.reshape(r, (p, k))
            exp_err = None
            for l in range(base.L):
                diff = ag.absolute(r_mat - Tensor(np.full((p, k), float(l + 1))))
                term = ag.slice_last(graph.tensor, l) * diff
                exp_err = term if exp_err is None else exp_err + term
            parts.append(ag.reshape(exp_err, (p * k,)))
            users = np.concatenate([users, iu])
        err = parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)
        return users, err

    def _detector_outputs(self, Z, H):
        users, err = self._error_edges(Z, H)
        z_star = dt.refined_embeddings(Z, users, err, self.n_total)
        return dt.detect_forward(z_star, self.det)

    def _weights_and_fraud(self, Z, H):
        if self.mode == "plain":
            return Tensor(np.ones(self.n_total)), None, None
        q = self._detector_outputs(Z, H)
        weights = ag.slice_last(q, dt.NORMAL)
        if self.mode == "graphrfi":
            fraud = dt.supervised_ce_loss(q, self.labels_fake)
        else:
            fraud = ag.scale(dt.ip_loss(q, self.priors), 1.0 / self.n_total)
        return weights, fraud, q

    def _loss(self):
        Z, H = rm.embed(self.graph, self.rec, features=self.features,
                        injected_features=self.injected_features)
        weights, fraud, _ = self._weights_and_fraud(Z, H)
        return rm.joint_loss(self.graph, self.rec, weights, fraud_loss=fraud,
                             features=self.features, precomputed=(Z, H))

    def _tensors(self):
        ts = list(self.rec.tensors())
        if self.det is not None and self.mode != "plain":
            ts += self.det.tensors()
        return ts

    # --- steps and epochs -----------------------------------------------------

    def step(self, lr, perturb=False):
        if perturb and self.adv_noise > 0:
            loss = dt.adversarial_training_step(self._tensors(), self._loss,
                                                lr, self.adv_noise)
        else:
            with ag.Tape() as tape:
                out = self._loss()
            if not np.isfinite(out.values).all():
                raise TrainingError(f"non-finite training loss: {out.values}")
            grads = ag.backward(tape, out)
            for t in self._tensors():
                g = grads.get(t)
                if g is not None:
                    t.values = t.values - lr * g
            loss = float(out.values)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss: {loss}")
        self.loss_log.append(loss)
        return loss

    def anomaly_scores(self):
        """Detached q(fake) per user under the current parameters."""
        if self.mode == "plain":
            raise ValidationError("no detector in plain mode")
        Z, H = rm.embed(self.graph, self.rec, features=self.features,
                        injected_features=self.injected_features)
        q = self._detector_outputs(Z, H)
        return q.values[:, dt.FAKE].copy()

    def holdout_auc(self, scores):
        if self.holdout.size == 0:
            return None
        sub = self.holdout
        y = self.labels_fake[sub]
        if y.all() or not y.any():
            return None
        return dt.auc(scores[sub], y)

    def epoch_end(self):
        """Log scores, track the AUC trigger, run PDR label adjustment."""
        if self.mode == "plain":
            return None
        scores = self.anomaly_scores()
        self.score_log.append(scores)
        auc_val = self.holdout_auc(scores)
        self.auc_log.append(auc_val)
        if self.mode == "pdr":
            if not self.triggered and auc_val is not None and auc_val >= self.cfg.a0:
                self.triggered = True
            if self.triggered:
                self.priors = dt.adjust_labels(self.priors, scores, self.cfg,
                                               self.c1, self.c2)
                self.c1, self.c2 = dt.decay_interval(self.c1, self.c2, self.cfg)
        return auc_val

    def train(self, epochs, steps_per_epoch, lr):
        for epoch in range(epochs):
            perturb = self.adv_noise > 0 and epoch >= self.adv_pretrain_epochs
            for _ in range(steps_per_epoch):
                self.step(lr, perturb=perturb)
            self.epoch_end()
        return self

    # --- evaluation helpers ----------------------------------------------------

    def embeddings(self):
        Z, H = rm.embed(self.graph, self.rec, features=self.features,
                        injected_features=self.injected_features)
        return Z, H

    def predicted_matrix(self):
        Z, H = self.embeddings()
        return rm.predict_all(Z, H, self.rec, self.base.L).values
