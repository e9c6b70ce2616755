"""Attack algorithms: soft labeling, surrogate-guided latent evolutionary
search, and the FGSM / PGD / generator-transfer / unguided-search baselines.

The guided search samples latent noise from N(0, sigma^2 * Sigma) with
Sigma = (alpha/d) I + (1-alpha) U U^T, where U is the normalized surrogate
gradient obtained white-box from the source model through the decoder.
Gradients of the black-box loss are estimated from antithetic pairs
(z + nu, z - nu); each pair costs two oracle queries.

Query accounting per attack: 1 initial success check, then per iteration
2P antithetic queries plus 1 success check on the updated candidate. An
attack that stops at one of those boundaries has queries_used == 1
(mod 2P+1). When opportunistic_exit is on (default), the 2P already-paid
candidates of a batch are also checked and a hit ends the attack before
the update, at queries_used == 0 (mod 2P+1); the exit kind is recorded so
reports stay auditable.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .models import (
    classifier_logits_t,
    decode_perturb,
    decode_perturb_t,
    encode,
    predict_scores,
)
from .rng import philox

LOG_CLAMP = 1e-12


class QueryBudgetExceededError(RuntimeError):
    pass


class QueryOracle:
    """Score-only, budgeted access to the attack target.

    Holds nothing but a scoring closure, so callers cannot reach logits,
    gradients, or parameters. Every scored image increments the counter by
    one; the query after the budget is refused.
    """

    def __init__(self, score_fn, budget):
        self._score_fn = score_fn
        self._budget = int(budget)
        self._count = 0

    @classmethod
    def for_classifier(cls, classifier, budget):
        return cls(lambda image: predict_scores(classifier, image), budget)

    @property
    def budget(self):
        return self._budget

    @property
    def queries_used(self):
        return self._count

    @property
    def remaining(self):
        return self._budget - self._count

    def scores(self, image):
        if self._count >= self._budget:
            raise QueryBudgetExceededError(f"query budget {self._budget} exhausted")
        self._count += 1
        return self._score_fn(image)

    def scores_batch(self, images):
        """n queries at once; consumes the remainder and refuses if n > remaining."""
        n = len(images)
        if self._count + n > self._budget:
            self._count = self._budget
            raise QueryBudgetExceededError(
                f"query budget {self._budget} exhausted mid-batch of {n}"
            )
        self._count += n
        return self._score_fn(np.asarray(images))


# ---------------------------------------------------------------------------
# soft labels


@dataclass
class SoftLabelTable:
    """Per target-class mean source-model probability vectors."""

    table: np.ndarray  # [target classes, source classes]
    counts: np.ndarray  # samples per target class

    def __getitem__(self, target_class):
        return self.table[target_class]

    @classmethod
    def identity(cls, k):
        """One-hot table for attacks within a single label space."""
        return cls(np.eye(k), np.ones(k, dtype=np.int64))


def compute_soft_labels(f_a, target_train) -> SoftLabelTable:
    """Mean source-model probability prediction over each target class's
    train samples."""
    samples = target_train.train if hasattr(target_train, "train") else target_train
    labels = np.array([s.label for s in samples])
    k_target = int(labels.max()) + 1
    x = np.stack([s.pixels for s in samples]).astype(np.float64)[:, None, :, :]
    scores = predict_scores(f_a, x)
    table = np.zeros((k_target, scores.shape[1]))
    counts = np.zeros(k_target, dtype=np.int64)
    for cls_id in range(k_target):
        members = scores[labels == cls_id]
        if len(members) == 0:
            raise ValueError(f"target class {cls_id} has no train samples")
        table[cls_id] = members.mean(axis=0)
        counts[cls_id] = len(members)
    return SoftLabelTable(table, counts)


# ---------------------------------------------------------------------------
# configuration and result types


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "untargeted"  # untargeted | targeted
    y_t: Optional[int] = None  # target class (targeted mode)
    eps: float = 8 / 255
    budget: int = 2100
    population: int = 20
    alpha: float = 0.5  # 1.0 = isotropic search (no guidance)
    beta: float = 1.0
    sigma: float = 0.1
    eta: float = 0.5
    delta: float = 0.0
    seed: int = 0
    opportunistic_exit: bool = True
    kl_order: str = "soft-first"  # soft-first: KL(s || f_A) ; paper: KL(f_A || s)
    targeted_guidance: str = "target-class"  # target-class: s_{y_t} ; true-class: s_y

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "targeted" and self.y_t is None:
            raise ValueError("targeted mode needs y_t")
        if self.population < 1:
            raise ValueError("population must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.kl_order not in ("soft-first", "paper"):
            raise ValueError(f"unknown kl_order {self.kl_order!r}")
        if self.targeted_guidance not in ("target-class", "true-class"):
            raise ValueError(f"unknown targeted_guidance {self.targeted_guidance!r}")


@dataclass
class TracePoint:
    iteration: int
    loss: float
    queries: int


@dataclass
class AttackResult:
    success: bool
    queries_used: int
    adversarial_image: np.ndarray
    trace: list = field(default_factory=list)
    failure_reason: Optional[str] = None
    exit_kind: str = "budget"  # initial | opportunistic | check | budget


# ---------------------------------------------------------------------------
# guided ES building blocks


def surrogate_gradient(f_a, gen, x, z, soft_label, kl_order="soft-first"):
    """d(KL)/dz through the decoder and the white-box source model.

    Does not touch the oracle; the sign of the result is irrelevant to the
    sampler (U enters only through U U^T).
    """
    x_batch = np.asarray(x, dtype=np.float64).reshape(1, 1, *np.asarray(x).shape[-2:])
    z_t = ad.Tensor(np.asarray(z, dtype=np.float64)[None, :], requires_grad=True)
    s_row = np.asarray(soft_label, dtype=np.float64)[None, :]
    with ad.Tape() as tape:
        xhat = decode_perturb_t(gen, x_batch, z_t)
        scores = ad.softmax(classifier_logits_t(f_a, xhat))
        if kl_order == "paper":
            loss = ad.kl_divergence(scores, ad.Tensor(s_row))
        else:
            loss = ad.kl_divergence(ad.Tensor(s_row), scores)
    tape.backward(loss)
    return z_t.grad[0].copy()


DEGENERATE_GRAD_NORM = 1e-12


def guided_subspace(grad):
    """Orthonormal basis of span(grad) (a single normalized column).

    Returns (U, degenerate); a vanishing gradient flags degenerate and the
    caller falls back to isotropic sampling for that iteration.
    """
    grad = np.asarray(grad, dtype=np.float64)
    norm = np.linalg.norm(grad)
    if norm < DEGENERATE_GRAD_NORM:
        return None, True
    return grad / norm, False


def sample_noise(subspace, alpha, sigma, dim, population, rng):
    """population draws from N(0, sigma^2 * ((alpha/d) I + (1-alpha) U U^T)).

    alpha == 1 draws only the isotropic component, so the unguided path
    consumes the rng stream identically whether or not a subspace exists.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    iso = rng.standard_normal((population, dim))
    noise = np.sqrt(alpha / dim) * iso
    if alpha < 1.0:
        if subspace is None:
            raise ValueError("alpha < 1 needs a guiding subspace")
        along = rng.standard_normal(population)
        noise = noise + np.sqrt(1.0 - alpha) * np.outer(along, subspace)
    return sigma * noise


def black_box_loss(scores, label, delta, mode="untargeted"):
    """Margin loss on log-probabilities (logits of the target are
    unavailable under score-based access; log is monotone so margins keep
    their sign). Accepts [k] or [n,k]."""
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    logp = np.log(np.maximum(np.atleast_2d(scores), LOG_CLAMP))
    n, k = logp.shape
    rows = np.arange(n)
    masked = logp.copy()
    masked[:, label] = -np.inf
    others = masked.max(axis=1)
    if mode == "targeted":
        margin = others - logp[:, label]
    else:
        margin = logp[:, label] - others
    loss = np.maximum(margin, -float(delta))
    return float(loss[0]) if single else loss


def antithetic_gradient(noise, losses_plus, losses_minus, beta, sigma):
    """g = beta / (sigma^2 P) * sum_i nu_i (L+_i - L-_i)."""
    noise = np.asarray(noise, dtype=np.float64)
    diffs = np.asarray(losses_plus, dtype=np.float64) - np.asarray(losses_minus, dtype=np.float64)
    population = noise.shape[0]
    return (beta / (sigma**2 * population)) * (noise.T @ diffs)


def estimate_gradient(oracle, gen, x, z, noise, beta, sigma, label, delta, mode):
    """Antithetic estimate around z; consumes exactly 2P oracle queries.

    Raises QueryBudgetExceededError (after consuming the remaining budget)
    if fewer than 2P queries are left; the partial estimate is discarded.
    """
    population = len(noise)
    cands = decode_perturb(gen, x, np.vstack([z + noise, z - noise]))
    scores = oracle.scores_batch(cands)
    lp = black_box_loss(scores[:population], label, delta, mode)
    lm = black_box_loss(scores[population:], label, delta, mode)
    return antithetic_gradient(noise, lp, lm, beta, sigma)


# ---------------------------------------------------------------------------
# the attack loop (shared by latent-space and input-space search)


def _succeeds(scores, label, mode):
    top = int(np.argmax(scores))
    return top == label if mode == "targeted" else top != label


def _guided_es_loop(latent0, decode_batch, surrogate_grad_fn, oracle, config, label):
    """Iterative guided search; see the module docstring for accounting."""
    mode = config.mode
    pop = config.population
    rng = philox(config.seed, "guided-es")
    dim = latent0.shape[0]

    z = latent0.astype(np.float64)
    xhat = decode_batch(z[None])[0]
    scores = oracle.scores(xhat)
    trace = [TracePoint(0, black_box_loss(scores, label, config.delta, mode), oracle.queries_used)]
    if _succeeds(scores, label, mode):
        return AttackResult(True, oracle.queries_used, xhat, trace, exit_kind="initial")

    iteration = 0
    while True:
        iteration += 1
        if oracle.remaining < 2 * pop + 1:
            return AttackResult(
                False, oracle.queries_used, xhat, trace, failure_reason="budget", exit_kind="budget"
            )
        if config.alpha < 1.0:
            subspace, degenerate = guided_subspace(surrogate_grad_fn(z))
            alpha_eff = 1.0 if degenerate else config.alpha
        else:
            subspace, alpha_eff = None, 1.0
        noise = sample_noise(subspace, alpha_eff, config.sigma, dim, pop, rng)
        cands = decode_batch(np.vstack([z + noise, z - noise]))
        all_scores = oracle.scores_batch(cands)
        lp = black_box_loss(all_scores[:pop], label, config.delta, mode)
        lm = black_box_loss(all_scores[pop:], label, config.delta, mode)
        if config.opportunistic_exit:
            for i in range(pop):
                for offset, loss_i in ((i, lp[i]), (pop + i, lm[i])):
                    if _succeeds(all_scores[offset], label, mode):
                        trace.append(TracePoint(iteration, float(loss_i), oracle.queries_used))
                        return AttackResult(
                            True, oracle.queries_used, cands[offset], trace, exit_kind="opportunistic"
                        )
        z = z - config.eta * antithetic_gradient(noise, lp, lm, config.beta, config.sigma)
        xhat = decode_batch(z[None])[0]
        scores = oracle.scores(xhat)
        trace.append(TracePoint(iteration, black_box_loss(scores, label, config.delta, mode), oracle.queries_used))
        if _succeeds(scores, label, mode):
            return AttackResult(True, oracle.queries_used, xhat, trace, exit_kind="check")


def tes_attack(f_a, gen, soft_labels, oracle, x, y, config: AttackConfig) -> AttackResult:
    """Two-stage transferred search: start from the encoder's latent code and
    follow guided ES. With alpha == 1 the surrogate model is never consulted
    (the guided term vanishes), which is exactly the unguided baseline."""
    x = np.asarray(x, dtype=np.float64)
    z0 = encode(gen, x)
    if config.alpha < 1.0:
        if config.mode == "targeted" and config.targeted_guidance == "target-class":
            guidance = soft_labels[config.y_t]
        else:
            guidance = soft_labels[y]
        surrogate_fn = lambda z: surrogate_gradient(f_a, gen, x, z, guidance, config.kl_order)
    else:
        surrogate_fn = None

    def decode_batch(z_rows):
        out = decode_perturb(gen, x, z_rows)
        return out if out.ndim == 4 else out[:, None, :, :]

    label = config.y_t if config.mode == "targeted" else int(y)
    return _guided_es_loop(z0, decode_batch, surrogate_fn, oracle, config, label)


def tremba_attack(gen, oracle, x, y, config: AttackConfig) -> AttackResult:
    """Unguided latent search: definitionally tes_attack with alpha forced
    to 1, sharing the same code path query for query."""
    return tes_attack(None, gen, None, oracle, x, y, replace(config, alpha=1.0))


def input_space_es_attack(f_a, soft_labels, oracle, x, y, config: AttackConfig) -> AttackResult:
    """Guided ES directly over a full-resolution perturbation (no generator):
    the candidate is x + eps*tanh(p) with p living in R^(H*W)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    x_batch = x.reshape(1, 1, h, w)
    eps = config.eps

    def decode_batch(p_rows):
        raw = p_rows.reshape(len(p_rows), 1, h, w)
        return ad.clip_to_ball(x_batch, x_batch + eps * np.tanh(raw), eps)

    if config.alpha < 1.0:
        if config.mode == "targeted" and config.targeted_guidance == "target-class":
            guidance = soft_labels[config.y_t]
        else:
            guidance = soft_labels[y]
        s_row = np.asarray(guidance, dtype=np.float64)[None, :]

        def surrogate_fn(p):
            p_t = ad.Tensor(p[None, :], requires_grad=True)
            with ad.Tape() as tape:
                pert = ad.scale(ad.tanh_op(ad.reshape(p_t, (1, 1, h, w))), eps)
                xhat = ad.ball_clip(x_batch, pert, eps)
                scores = ad.softmax(classifier_logits_t(f_a, xhat))
                if config.kl_order == "paper":
                    loss = ad.kl_divergence(scores, ad.Tensor(s_row))
                else:
                    loss = ad.kl_divergence(ad.Tensor(s_row), scores)
            tape.backward(loss)
            return p_t.grad[0].copy()

    else:
        surrogate_fn = None

    label = config.y_t if config.mode == "targeted" else int(y)
    return _guided_es_loop(np.zeros(h * w), decode_batch, surrogate_fn, oracle, config, label)


# ---------------------------------------------------------------------------
# zero-query baselines


def ag_attack(gen, x):
    """One-shot generator transfer: decode the clean image's own latent code."""
    return decode_perturb(gen, x, encode(gen, x))


def _soft_label_rows(soft_labels, labels, mode, y_t):
    if mode == "targeted":
        return np.broadcast_to(soft_labels[y_t], (len(labels), soft_labels.table.shape[1]))
    return soft_labels.table[np.asarray(labels)]


def _kl_input_gradient(f_a, soft_rows, x_batch, kl_order):
    x_t = ad.Tensor(x_batch, requires_grad=True)
    with ad.Tape() as tape:
        scores = ad.softmax(classifier_logits_t(f_a, x_t))
        if kl_order == "paper":
            loss = ad.kl_divergence(scores, ad.Tensor(soft_rows))
        else:
            loss = ad.kl_divergence(ad.Tensor(soft_rows), scores)
    tape.backward(loss)
    return x_t.grad


def fgsm_attack(f_a, soft_labels, x, labels, eps, mode="untargeted", y_t=None, kl_order="soft-first"):
    """One signed step on the soft-label KL: away from the own-class signature
    (untargeted) or toward the target-class signature (targeted).
    Zero oracle queries."""
    x = np.asarray(x, dtype=np.float64)
    batch, single = (x, False) if x.ndim == 4 else (x.reshape(1, 1, *x.shape[-2:]), True)
    labels = np.atleast_1d(labels)
    rows = _soft_label_rows(soft_labels, labels, mode, y_t)
    grad = _kl_input_gradient(f_a, rows, batch, kl_order)
    sign = -1.0 if mode == "targeted" else 1.0
    out = ad.clip_to_ball(batch, batch + sign * eps * np.sign(grad), eps)
    return out[0, 0] if single else out


def pgd_attack(
    f_a,
    soft_labels,
    x,
    labels,
    eps,
    steps=40,
    step_size=2 / 255,
    mode="untargeted",
    y_t=None,
    kl_order="soft-first",
):
    """Iterated signed steps with projection onto the eps-ball and [0,1];
    same ascent/descent convention as fgsm_attack. Zero oracle queries."""
    x = np.asarray(x, dtype=np.float64)
    batch, single = (x, False) if x.ndim == 4 else (x.reshape(1, 1, *x.shape[-2:]), True)
    labels = np.atleast_1d(labels)
    rows = _soft_label_rows(soft_labels, labels, mode, y_t)
    sign = -1.0 if mode == "targeted" else 1.0
    xhat = batch.copy()
    for _ in range(steps):
        grad = _kl_input_gradient(f_a, rows, xhat, kl_order)
        xhat = ad.clip_to_ball(batch, xhat + sign * step_size * np.sign(grad), eps)
    return xhat[0, 0] if single else xhat
