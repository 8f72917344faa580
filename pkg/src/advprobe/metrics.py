"""Success-rate metrics and the three evaluation sweeps.

Sweeps cover: success rate vs. query/iteration budget (evaluated from one
max-budget run per sample, success-within-budget semantics), vs. step
size epsilon (independent runs per grid value), and vs. sample count
(prefix aggregation of one fixed-config run set). Per-sample seeds derive
from the config seed and the sample index, so results do not depend on
worker scheduling.

The mean_true_conf and mean_flatness columns always aggregate the final
probability vectors of the underlying full runs; for budget sweeps they
are therefore constant along the grid (the budget rows differ only in
success_rate and mean_queries).
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, msimba, simba, tpgd
from .errors import ConsistencyError, DomainError
from .models import BlackBoxOracle

VARIABLES = ("iterations", "epsilon", "samples")
ATTACK_ORDER = ("tpgd", "simba", "msimba")

CSV_HEADER = "attack,variable,value,success_rate,mean_queries,mean_true_conf,mean_flatness"


def success_rate(results):
    """Fraction of attack results flagged successful."""
    results = list(results)
    if not results:
        raise DomainError("success_rate of an empty result list is undefined")
    return sum(1 for r in results if r.success) / len(results)


def true_class_confidence(probs, true_label):
    """Probability assigned to the true class."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_label < p.shape[0]:
        raise IndexError(f"label {true_label} out of range for {p.shape[0]} classes")
    return float(p[true_label])


def flatness(probs, true_label):
    """Normalized entropy of the non-true-class probability mass.

    1.0 means the remaining mass is spread uniformly over the K-1 other
    classes, 0.0 means it sits on a single class (or there is none).
    """
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[0]
    if k < 3:
        raise DomainError(f"flatness needs at least 3 classes, got {k}")
    if not 0 <= true_label < k:
        raise IndexError(f"label {true_label} out of range for {k} classes")
    rest = np.delete(p, true_label)
    total = float(rest.sum())
    if total <= 0.0:
        return 0.0
    q = rest / total
    nz = q[q > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return float(min(max(h / np.log(k - 1), 0.0), 1.0))


def per_sample_seed(base_seed, sample_index):
    """Stable per-sample attack seed (order- and scheduling-independent)."""
    return int(np.random.SeedSequence([int(base_seed), int(sample_index)]).generate_state(1)[0])


@dataclass
class SweepSpec:
    variable: str
    grid: list
    fixed_cfg: AttackConfig
    attack_set: list
    sample_set: object

    def validate(self):
        if self.variable not in VARIABLES:
            raise DomainError(f"unknown sweep variable {self.variable!r}")
        if not self.grid:
            raise DomainError("sweep grid must be nonempty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise DomainError(f"sweep grid must be strictly increasing, got {self.grid}")
        bad = [a for a in self.attack_set if a not in ATTACK_ORDER]
        if bad or not self.attack_set:
            raise DomainError(f"attack_set must be a nonempty subset of {ATTACK_ORDER}")
        if len(self.sample_set) == 0:
            raise DomainError("sample_set is empty")
        if self.variable == "samples" and self.grid[-1] > len(self.sample_set):
            raise DomainError(
                f"samples grid reaches {self.grid[-1]} but only "
                f"{len(self.sample_set)} samples are available"
            )


@dataclass
class RunSummary:
    """Per-run record kept by sweeps (images and traces are dropped)."""

    sample_index: int
    label: int
    tracked_class: int
    success: bool
    clean_misclassified: bool
    queries_used: int
    iterations_used: int
    final_probs: np.ndarray


@dataclass
class SweepRow:
    attack: str
    variable: str
    value: float
    success_rate: float
    mean_queries: float
    mean_true_conf: float
    mean_flatness: float


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    # (attack, grid_value or None) -> list of RunSummary, one per sample
    runs: dict = field(default_factory=dict)


def _summarize(idx, result):
    return RunSummary(
        sample_index=idx,
        label=result.label,
        tracked_class=result.tracked_class,
        success=result.success,
        clean_misclassified=result.clean_misclassified,
        queries_used=result.queries_used,
        iterations_used=result.iterations_used,
        final_probs=result.final_probs,
    )


def _run_one(attack, target_model, surrogate, sample, cfg):
    oracle = BlackBoxOracle(target_model)
    if attack == "tpgd":
        return tpgd(surrogate, oracle, sample, cfg)
    if attack == "simba":
        return simba(oracle, sample, cfg)
    return msimba(oracle, sample, cfg)


def _run_set(attack, target_model, surrogate, samples, cfg, jobs):
    def task(i):
        sample_cfg = AttackConfig(
            epsilon=cfg.epsilon,
            max_iters=cfg.max_iters,
            max_queries=cfg.max_queries,
            seed=per_sample_seed(cfg.seed, i),
            direction_policy=cfg.direction_policy,
            tpgd_steps=cfg.tpgd_steps,
        )
        return _summarize(i, _run_one(attack, target_model, surrogate, samples[i], sample_cfg))

    indices = range(len(samples))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(task, indices))
    return [task(i) for i in indices]


def _aggregate(attack, variable, value, summaries, success_flags, queries):
    confs = [true_class_confidence(s.final_probs, s.label) for s in summaries]
    # flatness is undefined for 2-class problems; report 0.0 there
    flats = [
        flatness(s.final_probs, s.label) if len(s.final_probs) >= 3 else 0.0 for s in summaries
    ]
    return SweepRow(
        attack=attack,
        variable=variable,
        value=value,
        success_rate=sum(success_flags) / len(summaries),
        mean_queries=float(np.mean(queries)),
        mean_true_conf=float(np.mean(confs)),
        mean_flatness=float(np.mean(flats)),
    )


def _within_budget(attack, summary, budget):
    spent = summary.iterations_used if attack == "tpgd" else summary.queries_used
    return summary.success and spent <= budget


def run_sweep(spec, target_model, surrogate=None, jobs=1):
    """Execute one sweep; deterministic given spec.fixed_cfg.seed.

    target_model is a models.Classifier (a fresh BlackBoxOracle is wrapped
    around it for every run, so query counts stay per-run); surrogate is
    required whenever tpgd is in the attack set.
    """
    spec.validate()
    if "tpgd" in spec.attack_set and surrogate is None:
        raise ConsistencyError("tpgd in the attack set requires a surrogate model")
    samples = list(spec.sample_set)
    cfg = spec.fixed_cfg
    out = SweepResult()

    if spec.variable == "iterations":
        budget = int(spec.grid[-1])
        for attack in spec.attack_set:
            run_cfg = AttackConfig(
                epsilon=cfg.epsilon,
                max_iters=cfg.max_iters,
                max_queries=budget if attack != "tpgd" else cfg.max_queries,
                seed=cfg.seed,
                direction_policy=cfg.direction_policy,
                tpgd_steps=cfg.tpgd_steps,
            )
            summaries = _run_set(attack, target_model, surrogate, samples, run_cfg, jobs)
            out.runs[(attack, None)] = summaries
            for b in spec.grid:
                flags = [_within_budget(attack, s, b) for s in summaries]
                spent = [
                    s.queries_used if _within_budget(attack, s, b) else min(s.queries_used, b)
                    for s in summaries
                ]
                out.rows.append(_aggregate(attack, "iterations", b, summaries, flags, spent))
    elif spec.variable == "epsilon":
        for attack in spec.attack_set:
            for eps in spec.grid:
                run_cfg = AttackConfig(
                    epsilon=float(eps),
                    max_iters=cfg.max_iters,
                    max_queries=cfg.max_queries,
                    seed=cfg.seed,
                    direction_policy=cfg.direction_policy,
                    tpgd_steps=cfg.tpgd_steps,
                )
                summaries = _run_set(attack, target_model, surrogate, samples, run_cfg, jobs)
                out.runs[(attack, float(eps))] = summaries
                flags = [s.success for s in summaries]
                spent = [s.queries_used for s in summaries]
                out.rows.append(_aggregate(attack, "epsilon", eps, summaries, flags, spent))
    else:  # samples
        for attack in spec.attack_set:
            summaries = _run_set(attack, target_model, surrogate, samples, cfg, jobs)
            out.runs[(attack, None)] = summaries
            for n in spec.grid:
                head = summaries[: int(n)]
                flags = [s.success for s in head]
                spent = [s.queries_used for s in head]
                out.rows.append(_aggregate(attack, "samples", n, head, flags, spent))
    return out


def _fmt_value(variable, value):
    if variable == "epsilon":
        return format(float(value), "g")
    return str(int(value))


def write_sweep_csv(result, path):
    """Write sweep rows as CSV; identical inputs yield identical bytes."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(CSV_HEADER + "\n")
        for r in result.rows:
            f.write(
                f"{r.attack},{r.variable},{_fmt_value(r.variable, r.value)},"
                f"{r.success_rate:.6f},{r.mean_queries:.3f},"
                f"{r.mean_true_conf:.6f},{r.mean_flatness:.6f}\n"
            )


def write_probs_dump(result, path):
    """Dump final probability vectors per (attack, sample) as JSON."""
    doc = {}
    for (attack, value), summaries in sorted(
        result.runs.items(), key=lambda kv: (kv[0][0], -1.0 if kv[0][1] is None else kv[0][1])
    ):
        key = attack if value is None else f"{attack}:{format(value, 'g')}"
        doc[key] = [
            {
                "sample": s.sample_index,
                "label": s.label,
                "tracked_class": s.tracked_class,
                "success": s.success,
                "clean_misclassified": s.clean_misclassified,
                "queries_used": s.queries_used,
                "final_probs": [float(p) for p in s.final_probs],
            }
            for s in summaries
        ]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
