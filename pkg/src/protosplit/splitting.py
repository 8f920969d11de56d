"""Splitting one inconsistent prototype channel into two consistent ones.

The procedure: copy the target kernel into a fresh channel (and copy its
head row), assemble three patch sets (concept A, concept B, reference),
then optimize only the two kernels under an activate/deactivate loss while
every other parameter stays frozen.  Because both channels live in the same
per-location softmax, raising one necessarily lowers the other, which is
what pulls the two concepts apart.  Afterwards the two affected head rows
are re-initialized and fine-tuned for a single epoch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConvergenceError, ValidationError
from .model import PatchRecord, PrototypeBank, activation_matrix
from .optim import AdamState, adam_step


class Membership(enum.Enum):
    S1 = "s1"
    S2 = "s2"
    SR = "sr"


@dataclass
class ConceptSets:
    """The two labeled concept sets plus the automatic reference set."""

    s1: list[PatchRecord]
    s2: list[PatchRecord]
    sr: list[PatchRecord] = field(default_factory=list)

    def validate(self, q: int = 2) -> None:
        if len(self.s1) < q or len(self.s2) < q:
            raise ValidationError(
                f"each concept needs at least {q} patches, got {len(self.s1)} and {len(self.s2)}"
            )
        k1 = {p.key() for p in self.s1}
        k2 = {p.key() for p in self.s2}
        kr = {p.key() for p in self.sr}
        if k1 & k2:
            raise ValidationError("concept sets s1 and s2 overlap")
        if kr & (k1 | k2):
            raise ValidationError("reference set overlaps a concept set")


@dataclass
class SplitHyperparams:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 10
    noise_sigma: float = 0.05
    epsilon: float = 1e-8
    alpha: float = 2.0
    kappa: float = 0.1
    accuracy_target: float = 0.999
    loss_target: float = 0.02
    patience: int = 10  # consecutive low-loss evaluations before stopping
    max_steps: int = 5000
    eval_every: int = 10
    batch_strategy: str = "uniform"  # or "stratified"
    kernel_jitter: float = 0.0  # symmetry breaking for identical-set experiments
    # a concept patch counts as accurate once its channel holds this much of
    # the softmax mass; 0.75 forces 3:1 dominance over everything else
    # combined and is reachable within max_steps at the default learning rate
    concentration_target: float = 0.75

    def __post_init__(self):
        positive = [
            self.learning_rate, self.weight_decay, self.batch_size, self.noise_sigma,
            self.epsilon, self.alpha, self.kappa, self.accuracy_target,
            self.loss_target, self.patience, self.max_steps, self.eval_every,
        ]
        if any(v <= 0 for v in positive):
            raise ValidationError("all split hyperparameters must be positive")
        if self.kappa >= -math.log(0.5):
            raise ValidationError(
                f"kappa must be < ln(2) so the deactivation hinge can engage, got {self.kappa}"
            )
        if not (0.5 < self.concentration_target < 1.0):
            raise ValidationError("concentration_target must lie in (0.5, 1)")
        if self.batch_strategy not in ("uniform", "stratified"):
            raise ValidationError(f"unknown batch_strategy {self.batch_strategy!r}")


class SplitStatus(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    CONVERGED = "converged"
    BUDGET_EXHAUSTED = "budget_exhausted"


_STATUS_ORDER = {
    SplitStatus.PENDING: 0,
    SplitStatus.RUNNING: 1,
    SplitStatus.CONVERGED: 2,
    SplitStatus.BUDGET_EXHAUSTED: 2,
}


class EvalPoint(NamedTuple):
    step: int
    smoothed_loss: float
    acc_s1: float
    acc_s2: float
    acc_sr: float


@dataclass
class ConceptAccuracy:
    s1: float
    s2: float
    sr: float
    vacuous: tuple[str, ...] = ()

    def all_at_least(self, target: float) -> bool:
        return self.s1 >= target and self.s2 >= target and self.sr >= target


@dataclass
class SplitSession:
    """One split in flight; owns the only two mutable kernels."""

    prototype_id: int
    new_channel: int
    sets: ConceptSets
    hyper: SplitHyperparams
    bank: PrototypeBank  # extended bank; frozen for the whole session
    kernel_e: np.ndarray
    kernel_new: np.ndarray
    optimizer: AdamState
    status: SplitStatus = SplitStatus.PENDING
    q: int = 2
    loss_history: list[float] = field(default_factory=list)
    eval_history: list[EvalPoint] = field(default_factory=list)

    def advance(self, new_status: SplitStatus) -> None:
        if _STATUS_ORDER[new_status] < _STATUS_ORDER[self.status]:
            raise ValidationError(f"cannot move {self.status.value} -> {new_status.value}")
        self.status = new_status


@dataclass
class SplitResult:
    prototype_id: int
    new_channel: int
    bank: PrototypeBank  # optimized kernels; head untouched until fine-tune
    accuracies: ConceptAccuracy
    steps_used: int
    converged: bool
    loss_history: list[float]
    eval_history: list[EvalPoint]


def duplicate_kernel(bank: PrototypeBank, e: int) -> PrototypeBank:
    """Append a copy of kernel e (and of its head row) as channel D."""
    if not (0 <= e < bank.num_prototypes):
        raise ValidationError(f"prototype id {e} out of range [0, {bank.num_prototypes})")
    kernels = np.vstack([bank.kernels, bank.kernels[e : e + 1]])
    return PrototypeBank(kernels, extend_head(bank.head, e), list(bank.class_names))


def extend_head(head: np.ndarray, e: int) -> np.ndarray:
    """Copy head row e into a new last row; all other rows unchanged."""
    head = np.asarray(head)
    if not (0 <= e < head.shape[0]):
        raise ValidationError(f"prototype id {e} out of range [0, {head.shape[0]})")
    return np.vstack([head, head[e : e + 1]])


def l_act(x: float, eps: float = 0.0) -> float:
    return -math.log(x + eps)


def l_deact(x: float, kappa: float, eps: float = 0.0) -> float:
    return max(0.0, -math.log(1.0 - x + eps) - kappa)


def split_loss(
    membership: Membership,
    p: np.ndarray,
    e: int,
    hyper: SplitHyperparams,
    new_channel: int | None = None,
) -> float:
    """Loss for one patch given its per-location softmax over D+1 channels."""
    n = len(p) - 1 if new_channel is None else new_channel
    eps = hyper.epsilon
    if membership is Membership.S1:
        return l_act(float(p[e]), eps)
    if membership is Membership.S2:
        return l_act(float(p[n]), eps)
    return hyper.alpha * (
        l_deact(float(p[e]), hyper.kappa, eps) + l_deact(float(p[n]), hyper.kappa, eps)
    )


def _upstream_grads(
    membership: Membership, p_e: float, p_n: float, hyper: SplitHyperparams
) -> tuple[float, float]:
    """dL/dp_e and dL/dp_new for one patch."""
    eps = hyper.epsilon
    if membership is Membership.S1:
        return -1.0 / (p_e + eps), 0.0
    if membership is Membership.S2:
        return 0.0, -1.0 / (p_n + eps)
    g_e = hyper.alpha / (1.0 - p_e + eps) if -math.log(1.0 - p_e + eps) > hyper.kappa else 0.0
    g_n = hyper.alpha / (1.0 - p_n + eps) if -math.log(1.0 - p_n + eps) > hyper.kappa else 0.0
    return g_e, g_n


def split_loss_gradient(
    feature: np.ndarray,
    kernels: np.ndarray,
    membership: Membership,
    e: int,
    hyper: SplitHyperparams,
    new_channel: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of split_loss composed with the shared softmax.

    Only the two free rows get gradients; the chain rule still runs through
    every channel's logit because the softmax couples them.
    """
    feature = np.asarray(feature, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    n = kernels.shape[0] - 1 if new_channel is None else new_channel
    logits = kernels @ feature
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    p = exp / exp.sum()
    g_e, g_n = _upstream_grads(membership, float(p[e]), float(p[n]), hyper)
    # softmax jacobian rows for the two coupled channels
    dl_e = g_e * p[e] * (1.0 - p[e]) - g_n * p[n] * p[e]
    dl_n = g_n * p[n] * (1.0 - p[n]) - g_e * p[e] * p[n]
    return dl_e * feature, dl_n * feature


def per_concept_accuracy(
    sets: ConceptSets,
    bank: PrototypeBank,
    e: int,
    hyper: SplitHyperparams,
    new_channel: int | None = None,
) -> ConceptAccuracy:
    """Per-concept accuracy in terms of softmax mass concentration.

    A concept patch counts as correct when its channel holds at least
    ``concentration_target`` of the softmax mass, which in particular makes
    it the argmax over all D+1 channels by a wide margin.  A reference
    patch counts when both channels sit in the hinge-free zone
    p <= 1 - exp(-kappa).  A bare-argmax count would be degenerate right
    after duplication: the twin kernels are the only contenders on their
    own patches, so any infinitesimal asymmetry already wins the argmax
    while the channels are still unseparated.
    An empty component scores 1.0 and is reported as vacuous.
    """
    n = bank.num_prototypes - 1 if new_channel is None else new_channel
    concentrated = hyper.concentration_target
    bound = 1.0 - math.exp(-hyper.kappa)
    vacuous = []

    def acts_for(patches):
        feats = np.stack([p.feature for p in patches])
        return activation_matrix(feats, bank.kernels)

    acc1 = acc2 = acc_r = 1.0
    if sets.s1:
        acc1 = float(np.mean(acts_for(sets.s1)[:, e] >= concentrated))
    else:
        vacuous.append("s1")
    if sets.s2:
        acc2 = float(np.mean(acts_for(sets.s2)[:, n] >= concentrated))
    else:
        vacuous.append("s2")
    if sets.sr:
        a = acts_for(sets.sr)
        acc_r = float(np.mean((a[:, e] <= bound) & (a[:, n] <= bound)))
    else:
        vacuous.append("sr")
    return ConceptAccuracy(acc1, acc2, acc_r, tuple(vacuous))


def build_reference_set(
    corpus: list[PatchRecord],
    bank: PrototypeBank,
    e: int,
    size: int,
    exclude_keys: set | None = None,
) -> tuple[list[PatchRecord], bool]:
    """Automatic reference patches: high activations of other in-use prototypes.

    A prototype is in use when its head row has positive norm.  Selection is
    round-robin across those prototypes for diversity, skipping any patch
    whose top channel is e (or a fresh duplicate of e) and any key in
    ``exclude_keys``.  Returns (patches, short_flag).
    """
    if size < 1:
        raise ValidationError("reference set size must be >= 1")
    exclude_keys = exclude_keys or set()
    excluded_channels = {e}
    for d in range(bank.num_prototypes):
        if d != e and np.array_equal(bank.kernels[d], bank.kernels[e]):
            excluded_channels.add(d)

    feats = np.stack([p.feature for p in corpus])
    acts = activation_matrix(feats, bank.kernels)
    argmax = np.argmax(acts, axis=1)
    row_norms = np.linalg.norm(bank.head, axis=1)
    donors = [
        d
        for d in range(bank.num_prototypes)
        if d not in excluded_channels and row_norms[d] > 0
    ]

    queues = []
    for d in donors:
        order = np.argsort(-acts[:, d], kind="stable")
        queue = [
            int(i)
            for i in order
            if int(argmax[i]) not in excluded_channels and corpus[int(i)].key() not in exclude_keys
        ]
        queues.append(queue)

    picked: list[int] = []
    picked_keys: set = set()
    positions = [0] * len(queues)
    progressed = True
    while len(picked) < size and progressed:
        progressed = False
        for qi, queue in enumerate(queues):
            while positions[qi] < len(queue):
                idx = queue[positions[qi]]
                positions[qi] += 1
                key = corpus[idx].key()
                if key in picked_keys:
                    continue
                picked.append(idx)
                picked_keys.add(key)
                progressed = True
                break
            if len(picked) == size:
                break
    return [corpus[i] for i in picked], len(picked) < size


def start_session(
    bank: PrototypeBank,
    e: int,
    sets: ConceptSets,
    hyper: SplitHyperparams | None = None,
    q: int = 2,
    rng_seed: int = 0,
) -> SplitSession:
    """Duplicate the kernel and head row, validate the sets, stage a session."""
    hyper = hyper or SplitHyperparams()
    sets.validate(q)
    extended = duplicate_kernel(bank, e)
    new_channel = extended.num_prototypes - 1
    kernel_e = extended.kernels[e].astype(np.float64).copy()
    kernel_new = extended.kernels[new_channel].astype(np.float64).copy()
    if hyper.kernel_jitter:
        jitter_rng = np.random.default_rng(rng_seed)
        kernel_new = kernel_new + hyper.kernel_jitter * jitter_rng.normal(size=kernel_new.shape)
    params = np.stack([kernel_e, kernel_new])
    return SplitSession(
        prototype_id=e,
        new_channel=new_channel,
        sets=sets,
        hyper=hyper,
        bank=extended,
        kernel_e=kernel_e,
        kernel_new=kernel_new,
        optimizer=AdamState.zeros_like(params),
        q=q,
    )


ProgressCallback = Callable[[int, float, ConceptAccuracy], None]


def run_split(
    session: SplitSession,
    rng_seed: int | list[int] = 0,
    progress_callback: ProgressCallback | None = None,
) -> SplitResult:
    """Optimize the two kernels until the convergence criteria fire.

    Minibatches are drawn from S1 + S2 + Sr with fresh Gaussian noise on the
    features each step; the step loss is the mean of per-patch losses.
    Deterministic for a fixed seed.
    """
    if session.status is not SplitStatus.PENDING:
        raise ValidationError(f"session already {session.status.value}")
    session.sets.validate(session.q)
    session.advance(SplitStatus.RUNNING)

    hyper = session.hyper
    e, n = session.prototype_id, session.new_channel
    rng = np.random.default_rng(rng_seed)

    members = (
        [(p, Membership.S1) for p in session.sets.s1]
        + [(p, Membership.S2) for p in session.sets.s2]
        + [(p, Membership.SR) for p in session.sets.sr]
    )
    feats = np.stack([p.feature for p, _ in members]).astype(np.float64)
    kinds = [m for _, m in members]
    pool_size = len(members)
    group_idx = {
        Membership.S1: [i for i, m in enumerate(kinds) if m is Membership.S1],
        Membership.S2: [i for i, m in enumerate(kinds) if m is Membership.S2],
        Membership.SR: [i for i, m in enumerate(kinds) if m is Membership.SR],
    }

    kernels = session.bank.kernels.astype(np.float64).copy()
    kernels[e] = session.kernel_e
    kernels[n] = session.kernel_new
    params = np.stack([kernels[e], kernels[n]])
    state = session.optimizer

    eps = hyper.epsilon
    bound_log = hyper.kappa
    low_loss_streak = 0
    converged = False
    steps_used = 0
    accs = per_concept_accuracy(session.sets, _bank_with(session.bank, e, n, params), e, hyper, n)

    for step in range(1, hyper.max_steps + 1):
        if hyper.batch_strategy == "stratified":
            batch = _stratified_batch(rng, group_idx, hyper.batch_size)
        else:
            batch = rng.integers(0, pool_size, size=hyper.batch_size)
        noisy = feats[batch] + hyper.noise_sigma * rng.standard_normal((len(batch), feats.shape[1]))

        logits = noisy @ kernels.T
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        p = logits / logits.sum(axis=1, keepdims=True)

        losses = np.empty(len(batch))
        grad_e = np.zeros(feats.shape[1])
        grad_n = np.zeros(feats.shape[1])
        for bi, pool_i in enumerate(batch):
            kind = kinds[pool_i]
            pe, pn = float(p[bi, e]), float(p[bi, n])
            if kind is Membership.S1:
                losses[bi] = -math.log(pe + eps)
            elif kind is Membership.S2:
                losses[bi] = -math.log(pn + eps)
            else:
                losses[bi] = hyper.alpha * (
                    max(0.0, -math.log(1.0 - pe + eps) - bound_log)
                    + max(0.0, -math.log(1.0 - pn + eps) - bound_log)
                )
            g_e, g_n = _upstream_grads(kind, pe, pn, hyper)
            dl_e = g_e * pe * (1.0 - pe) - g_n * pn * pe
            dl_n = g_n * pn * (1.0 - pn) - g_e * pe * pn
            grad_e += dl_e * noisy[bi]
            grad_n += dl_n * noisy[bi]

        loss = float(losses.mean())
        if not math.isfinite(loss):
            raise ConvergenceError(
                f"non-finite loss at step {step} for prototype {e}", step=step, loss=loss
            )
        grads = np.stack([grad_e, grad_n]) / len(batch)
        params = adam_step(
            params, grads, state,
            learning_rate=hyper.learning_rate,
            weight_decay=hyper.weight_decay,
            epsilon=hyper.epsilon,
        )
        kernels[e] = params[0]
        kernels[n] = params[1]
        session.loss_history.append(loss)
        steps_used = step

        if step % hyper.eval_every == 0 or step == hyper.max_steps:
            window = session.loss_history[-10:]
            smoothed = float(np.mean(window))
            accs = per_concept_accuracy(
                session.sets, _bank_with(session.bank, e, n, params), e, hyper, n
            )
            session.eval_history.append(EvalPoint(step, smoothed, accs.s1, accs.s2, accs.sr))
            if progress_callback is not None:
                progress_callback(step, smoothed, accs)
            if accs.all_at_least(hyper.accuracy_target):
                converged = True
                break
            if smoothed < hyper.loss_target:
                low_loss_streak += 1
                if low_loss_streak >= hyper.patience:
                    converged = True
                    break
            else:
                low_loss_streak = 0

    session.kernel_e = params[0].copy()
    session.kernel_new = params[1].copy()
    session.advance(SplitStatus.CONVERGED if converged else SplitStatus.BUDGET_EXHAUSTED)
    result_bank = _bank_with(session.bank, e, n, params)
    return SplitResult(
        prototype_id=e,
        new_channel=n,
        bank=result_bank,
        accuracies=accs,
        steps_used=steps_used,
        converged=converged,
        loss_history=list(session.loss_history),
        eval_history=list(session.eval_history),
    )


def _bank_with(bank: PrototypeBank, e: int, n: int, params: np.ndarray) -> PrototypeBank:
    kernels = bank.kernels.copy()
    kernels[e] = params[0]
    kernels[n] = params[1]
    return PrototypeBank(kernels, bank.head.copy(), list(bank.class_names))


def _stratified_batch(rng, group_idx, batch_size):
    groups = [g for g in group_idx.values() if g]
    picks = []
    for gi, g in enumerate(groups):
        share = batch_size // len(groups) + (1 if gi < batch_size % len(groups) else 0)
        picks.extend(rng.choice(g, size=share, replace=True))
    return np.asarray(picks)


@dataclass
class HeadFinetuneResult:
    bank: PrototypeBank
    fallback_used: bool
    init_mean: float
    init_std: float


def _nnls2(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """argmin_{w >= 0} 0.5 w^T a w - b^T w for a 2x2 SPD system, by
    enumerating the four active sets."""
    best = (0.0, 0.0)
    best_val = 0.0  # objective at the origin
    candidates = []
    w = np.linalg.solve(a, b)
    if w[0] >= 0 and w[1] >= 0:
        candidates.append((float(w[0]), float(w[1])))
    if a[0, 0] > 0 and b[0] > 0:
        candidates.append((float(b[0] / a[0, 0]), 0.0))
    if a[1, 1] > 0 and b[1] > 0:
        candidates.append((0.0, float(b[1] / a[1, 1])))
    for cand in candidates:
        vec = np.asarray(cand)
        val = 0.5 * vec @ a @ vec - b @ vec
        if val < best_val:
            best_val = val
            best = cand
    return best


def reinit_and_finetune_head(
    bank: PrototypeBank,
    e: int,
    dataset: list[tuple[np.ndarray, int]],
    epochs: int = 1,
    ridge: float = 1e-3,
    target_scale: float = 1.0,
    rng_seed: int | list[int] = 0,
    new_channel: int | None = None,
) -> HeadFinetuneResult:
    """Redraw head rows e and new from the other rows' positive-weight
    statistics, then refit only those rows on (pooled activation, class)
    pairs.

    The fit is one pass over the dataset accumulating sufficient statistics
    followed by an exact non-negative ridge solve per class column: the two
    rows are chosen so the class scores approach class indicators (scale
    ``target_scale``) on top of what the frozen rows already contribute.
    Non-negativity is part of the solve (two-variable active set), not a
    clamp afterwards: columns whose unconstrained optimum needs a negative
    coefficient to cancel shared-image scores would otherwise come back
    badly off.  The solve is deterministic and convex; per-sample descent
    on a score-share objective was measured to leave large spurious weights
    on ambiguous classes after a single epoch.  ``epochs`` is accepted for
    interface parity; the statistics pass uses each sample exactly once.
    With an empty dataset the redrawn rows are returned as-is.  All other
    rows come back bit-identical.
    """
    del epochs
    n = bank.num_prototypes - 1 if new_channel is None else new_channel
    rng = np.random.default_rng(rng_seed)
    head = bank.head.astype(np.float64).copy()
    others = np.delete(head, [e, n], axis=0)
    positives = others[others > 0]
    if positives.size:
        mu, sigma = float(positives.mean()), float(positives.std())
        fallback = False
    else:
        mu, sigma = 0.1, 0.01
        fallback = True
    head[e] = np.clip(rng.normal(mu, sigma, size=head.shape[1]), 0.0, None)
    head[n] = np.clip(rng.normal(mu, sigma, size=head.shape[1]), 0.0, None)

    if dataset:
        num_classes = head.shape[1]
        frozen = head.copy()
        frozen[e] = 0.0
        frozen[n] = 0.0
        xtx = np.zeros((2, 2))
        xty = np.zeros((2, num_classes))
        for pooled, label in dataset:
            pooled = np.asarray(pooled, dtype=np.float64)
            x = np.array([pooled[e], pooled[n]])
            residual = -(pooled @ frozen)
            residual[label] += target_scale
            xtx += np.outer(x, x)
            xty += np.outer(x, residual)
        a = xtx + ridge * np.eye(2)
        for k in range(num_classes):
            head[e][k], head[n][k] = _nnls2(a, xty[:, k])

    out_head = bank.head.copy().astype(np.float64)
    out_head[e] = head[e]
    out_head[n] = head[n]
    new_bank = PrototypeBank(bank.kernels.copy(), out_head, list(bank.class_names))
    return HeadFinetuneResult(new_bank, fallback, mu, sigma)
