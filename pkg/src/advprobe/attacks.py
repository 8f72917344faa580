"""Three adversarial attacks sharing one config/result contract.

* tpgd   -- iterated sign-gradient ascent on a surrogate's loss, judged
            once against the black-box target (pure transfer).
* simba  -- query attack probing random directions with +/- epsilon steps,
            accepting any step that lowers the true class's probability.
* msimba -- query attack that fixes the most-confused class c from the
            clean prediction and accepts steps that raise P(c | x).

All attacks record one trace entry per oracle query, clip candidates to
[0,1], and stop as soon as any queried point is misclassified. The probed
image is then the adversarial output whether or not the acceptance rule
would have kept it; its trace record still carries the rule's verdict, so
accepted-step probabilities stay strictly monotone (and the sup-norm of
the perturbation is bounded by eps times accepted steps plus one terminal
probe under dense_sign). A clean input that is already misclassified
counts as an immediate success with zero iterations and is flagged so
metrics can exclude it.

Budget semantics: max_queries caps oracle calls (the clean baseline call
included); max_iters caps direction probes. One sweep "iteration" is one
oracle query for simba/msimba and one gradient step for tpgd.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DomainError
from .models import most_confused_class

PIXEL_BASIS = "pixel_basis"
DENSE_SIGN = "dense_sign"


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    max_iters: int = 100_000
    max_queries: int = 800
    seed: int = 0
    direction_policy: str | None = None  # None = attack-specific default
    tpgd_steps: int = 10

    def validate(self):
        if self.epsilon < 0:
            raise DomainError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.max_iters < 1 or self.max_queries < 1 or self.tpgd_steps < 1:
            raise DomainError("iteration, query and step budgets must be positive")
        if self.direction_policy not in (None, PIXEL_BASIS, DENSE_SIGN):
            raise DomainError(f"unknown direction policy {self.direction_policy!r}")


@dataclass
class TraceRecord:
    """One oracle query: tracked-class probability at the probed point."""

    iter: int
    tracked_class: int
    prob: float
    accepted: bool
    sign: int
    coord: int | None = None  # flat pixel index under pixel_basis probes

    def export_dict(self):
        return {
            "iter": self.iter,
            "tracked_class": self.tracked_class,
            "prob": self.prob,
            "accepted": self.accepted,
            "sign": self.sign,
        }


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    queries_used: int
    iterations_used: int
    trace: list = field(default_factory=list)
    final_probs: np.ndarray = None
    perturbation_linf: float = 0.0
    clean_misclassified: bool = False
    tracked_class: int = 0
    label: int = 0

    def to_json_dict(self):
        return {
            "success": self.success,
            "label": self.label,
            "predicted": int(np.argmax(self.final_probs)),
            "tracked_class": self.tracked_class,
            "queries_used": self.queries_used,
            "iterations_used": self.iterations_used,
            "clean_misclassified": self.clean_misclassified,
            "perturbation_linf": self.perturbation_linf,
            "final_probs": [float(p) for p in self.final_probs],
        }


def clip01(x):
    """Clamp an image tensor into the valid pixel range."""
    return np.clip(x, 0.0, 1.0)


def write_trace_jsonl(result, path):
    """Export the per-query trace as JSON lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in result.trace:
            f.write(json.dumps(rec.export_dict(), sort_keys=True))
            f.write("\n")


def _misclassified(probs, label):
    return int(np.argmax(probs)) != label


def _result(x0, adv, probs, label, tracked, success, queries, iters, trace, clean=False):
    return AttackResult(
        adversarial=adv.astype(np.float32, copy=False),
        success=success,
        queries_used=queries,
        iterations_used=iters,
        trace=trace,
        final_probs=probs,
        perturbation_linf=float(np.max(np.abs(adv.astype(np.float64) - x0))),
        clean_misclassified=clean,
        tracked_class=tracked,
        label=label,
    )


class _BasisSampler:
    """Single-coordinate directions without replacement; reshuffles once
    the basis is exhausted."""

    def __init__(self, n_dims, rng):
        self.n = n_dims
        self.rng = rng
        self.order = rng.permutation(n_dims)
        self.pos = 0

    def draw(self):
        if self.pos >= self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        c = int(self.order[self.pos])
        self.pos += 1
        return c


def _probe_pair(x, eps, direction, policy):
    """Candidate images for the +/- probes of one direction."""
    if policy == PIXEL_BASIS:
        both = []
        for sign in (1, -1):
            cand = x.copy()
            flat = cand.reshape(-1)
            flat[direction] = min(max(flat[direction] + sign * eps, 0.0), 1.0)
            both.append(cand)
        return both
    step = (eps * direction).astype(np.float32)
    return [clip01(x + step), clip01(x - step)]


def _query_attack(target, sample, cfg, mode):
    """Shared probe-and-accept loop; mode is 'simba' or 'msimba'."""
    cfg.validate()
    x0 = np.asarray(sample.image, dtype=np.float32)
    y = sample.label
    rng = np.random.default_rng(cfg.seed)
    policy = cfg.direction_policy or (PIXEL_BASIS if mode == "simba" else DENSE_SIGN)

    trace = []
    probs = target.predict_probs(x0)
    queries = 1
    tracked = y if mode == "simba" else most_confused_class(probs, y)
    trace.append(TraceRecord(0, tracked, float(probs[tracked]), True, 0))
    if _misclassified(probs, y):
        return _result(x0, x0, probs, y, tracked, True, queries, 0, trace, clean=True)

    x = x0.copy()
    best = float(probs[tracked])
    cur_probs = probs
    sampler = _BasisSampler(x0.size, rng) if policy == PIXEL_BASIS else None

    it = 0
    while it < cfg.max_iters and queries < cfg.max_queries:
        it += 1
        if policy == PIXEL_BASIS:
            direction = sampler.draw()
            coord = direction
        else:
            direction = (rng.integers(0, 2, size=x0.shape, dtype=np.int8) * 2 - 1).astype(
                np.float32
            )
            coord = None
        candidates = _probe_pair(x, cfg.epsilon, direction, policy)
        for cand, sign in zip(candidates, (1, -1)):
            if queries >= cfg.max_queries:
                break
            p = target.predict_probs(cand)
            queries += 1
            prob = float(p[tracked])
            # the accepted flag records the rule's verdict; a misclassified
            # probe ends the attack (and becomes the output) either way
            better = prob < best if mode == "simba" else prob > best
            trace.append(TraceRecord(it, tracked, prob, better, sign, coord))
            if _misclassified(p, y):
                return _result(x0, cand, p, y, tracked, True, queries, it, trace)
            if better:
                x = cand
                best = prob
                cur_probs = p
                break
    return _result(x0, x, cur_probs, y, tracked, False, queries, it, trace)


def simba(target, sample, cfg):
    """Probe random directions, accepting steps that strictly lower the
    true class's probability. Default direction policy: pixel_basis."""
    return _query_attack(target, sample, cfg, "simba")


def msimba(target, sample, cfg):
    """Fix the most-confused class c from the clean probabilities, then
    accept steps that strictly raise P(c | x). Default policy: dense_sign."""
    return _query_attack(target, sample, cfg, "msimba")


def tpgd(surrogate, target, sample, cfg):
    """Transfer attack: tpgd_steps of x <- clip(x + eps * sign(grad)) on
    the surrogate's loss, then one target query to judge success.

    The target is queried exactly twice (clean baseline and final
    evaluation); the surrogate supplies all gradients.
    """
    cfg.validate()
    if surrogate.descriptor.num_classes != target.num_classes:
        raise ConsistencyError(
            f"surrogate has {surrogate.descriptor.num_classes} classes, "
            f"target has {target.num_classes}"
        )
    x0 = np.asarray(sample.image, dtype=np.float32)
    y = sample.label

    trace = []
    probs = target.predict_probs(x0)
    queries = 1
    trace.append(TraceRecord(0, y, float(probs[y]), True, 0))
    if _misclassified(probs, y):
        return _result(x0, x0, probs, y, y, True, queries, 0, trace, clean=True)

    x = x0.copy()
    for _ in range(cfg.tpgd_steps):
        g = surrogate.input_gradient(x, y)
        x = clip01(x + cfg.epsilon * np.sign(g)).astype(np.float32)
    p = target.predict_probs(x)
    queries += 1
    success = _misclassified(p, y)
    trace.append(TraceRecord(cfg.tpgd_steps, y, float(p[y]), True, 1))
    return _result(x0, x, p, y, y, success, queries, cfg.tpgd_steps, trace)


ATTACKS = {"tpgd": tpgd, "simba": simba, "msimba": msimba}
