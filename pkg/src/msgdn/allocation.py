"""Image-level bit allocation: one coding point per image under a mean-bpp budget.

The search maximizes mean quality subject to the rate budget:

1. Lagrangian sweep over every slope breakpoint, keeping the best feasible
   per-image ``argmax(quality - lambda * rate)`` plan;
2. greedy single-image upgrades that still fit the budget;
3. branch-and-bound with the LP-relaxation (convex hull) bound, seeded by
   the plan from 2, which makes the result exact unless the node limit hits.

Ties between equally good plans go to the lexicographically smallest QP
vector, with images ordered by path.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import ConfigError, InfeasibleBudget

log = logging.getLogger(__name__)

CANDIDATES_VERSION = 1
PLAN_VERSION = 1
CANDIDATE_COLUMNS = ["image", "qp", "bits", "width", "height", "quality_db"]
PLAN_COLUMNS = ["image", "qp", "bits", "width", "height", "bpp", "quality_db"]
BUDGET_SLACK = 1e-12
_TIE = 1e-12


@dataclass(frozen=True)
class Candidate:
    image: str
    qp: int
    bits: int
    width: int
    height: int
    quality_db: float

    @property
    def pixels(self) -> int:
        return self.width * self.height

    @property
    def bpp(self) -> float:
        return self.bits / self.pixels


class CandidateSet:
    """Coding-point options per image, images kept in path order, options in QP order."""

    def __init__(self, candidates: Iterable[Candidate]):
        options: Dict[str, Dict[int, Candidate]] = {}
        for c in candidates:
            per = options.setdefault(c.image, {})
            if c.qp in per:
                raise ConfigError(f"duplicate candidate for {c.image} at QP {c.qp}")
            if c.bits <= 0 or c.pixels <= 0:
                raise ConfigError(f"candidate {c.image}@{c.qp}: bits and dimensions must be positive")
            per[c.qp] = c
        if not options:
            raise ConfigError("empty candidate set")
        self.options: Dict[str, List[Candidate]] = {
            img: [per[q] for q in sorted(per)] for img, per in sorted(options.items())
        }
        self.warnings = self._monotonicity_warnings()
        for w in self.warnings:
            log.warning(w)

    @property
    def images(self) -> List[str]:
        return list(self.options)

    def __len__(self) -> int:
        return len(self.options)

    def option(self, image: str, qp: int) -> Candidate:
        for c in self.options[image]:
            if c.qp == qp:
                return c
        raise KeyError(f"{image} has no candidate at QP {qp}")

    def _monotonicity_warnings(self) -> List[str]:
        out = []
        for img, opts in self.options.items():
            by_bits = sorted(opts, key=lambda c: -c.bits)
            for hi, lo in zip(by_bits, by_bits[1:]):
                if lo.quality_db > hi.quality_db:
                    out.append(
                        f"{img}: QP {lo.qp} has fewer bits but higher quality than QP {hi.qp}"
                    )
        return out


@dataclass
class AllocationPlan:
    choices: Dict[str, int]
    mean_bpp: float
    mean_quality: float
    target_bpp: float
    budget_mode: str = "mean"
    exact: bool = True
    lagrange_multiplier: Optional[float] = None
    nodes: int = 0


def mean_bpp(plan, candidates: CandidateSet) -> float:
    choices = plan.choices if isinstance(plan, AllocationPlan) else plan
    return sum(candidates.option(img, qp).bpp for img, qp in choices.items()) / len(choices)


def pooled_bpp(plan, candidates: CandidateSet) -> float:
    choices = plan.choices if isinstance(plan, AllocationPlan) else plan
    opts = [candidates.option(img, qp) for img, qp in choices.items()]
    return sum(c.bits for c in opts) / sum(c.pixels for c in opts)


def mean_quality(plan, candidates: CandidateSet) -> float:
    choices = plan.choices if isinstance(plan, AllocationPlan) else plan
    return sum(candidates.option(img, qp).quality_db for img, qp in choices.items()) / len(choices)


# --- solver ----------------------------------------------------------------

class _Problem:
    """Additive costs so that the budget reads ``sum(cost) <= target``."""

    def __init__(self, candidates: CandidateSet, mode: str):
        self.images = candidates.images
        self.opts = [candidates.options[i] for i in self.images]
        n = len(self.images)
        if mode == "mean":
            self.cost = [[c.bpp / n for c in opts] for opts in self.opts]
        elif mode == "pooled":
            total = sum(opts[0].pixels for opts in self.opts)
            self.cost = [[c.bits / total for c in opts] for opts in self.opts]
        else:
            raise ConfigError(f"unknown budget mode {mode!r}")
        self.qual = [[c.quality_db / n for c in opts] for opts in self.opts]
        self.hulls = [_upper_hull(cs, qs) for cs, qs in zip(self.cost, self.qual)]

    def evaluate(self, idx: Sequence[int]) -> Tuple[float, float]:
        cost = sum(self.cost[i][j] for i, j in enumerate(idx))
        qual = sum(self.qual[i][j] for i, j in enumerate(idx))
        return cost, qual

    def qps(self, idx: Sequence[int]) -> Tuple[int, ...]:
        return tuple(self.opts[i][j].qp for i, j in enumerate(idx))


def _upper_hull(costs: List[float], quals: List[float]) -> List[Tuple[float, float]]:
    """Concave upper-left hull of (cost, quality), starting at the cheapest point."""
    pts = sorted(zip(costs, quals), key=lambda p: (p[0], -p[1]))
    hull: List[Tuple[float, float]] = []
    for c, q in pts:
        if hull and q <= hull[-1][1]:
            continue  # dominated: costs more, no better
        while len(hull) >= 2:
            (c1, q1), (c2, q2) = hull[-2], hull[-1]
            if (q2 - q1) * (c - c1) <= (q - q1) * (c2 - c1):
                hull.pop()
            else:
                break
        hull.append((c, q))
    return hull


def _lp_bound(prob: _Problem, start: int, budget: float) -> float:
    """LP-relaxation optimum of images[start:] with `budget` left; -inf if infeasible."""
    base_cost = sum(h[0][0] for h in prob.hulls[start:])
    if base_cost > budget + BUDGET_SLACK:
        return float("-inf")
    value = sum(h[0][1] for h in prob.hulls[start:])
    left = budget - base_cost
    segments = []
    for h in prob.hulls[start:]:
        for (c1, q1), (c2, q2) in zip(h, h[1:]):
            segments.append(((q2 - q1) / (c2 - c1), c2 - c1, q2 - q1))
    segments.sort(key=lambda s: -s[0])
    for slope, dc, dq in segments:
        if left <= 0:
            break
        if dc <= left:
            value += dq
            left -= dc
        else:
            value += slope * left
            left = 0.0
    return value


def _better(q: float, qps: Tuple[int, ...], best_q: float, best_qps: Optional[Tuple[int, ...]]) -> bool:
    if best_qps is None or q > best_q + _TIE:
        return True
    return abs(q - best_q) <= _TIE and qps < best_qps


def _lagrangian_sweep(prob: _Problem, target: float):
    lambdas = {0.0, float("inf")}
    for cs, qs in zip(prob.cost, prob.qual):
        for a in range(len(cs)):
            for b in range(len(cs)):
                if cs[a] > cs[b] and qs[a] > qs[b]:
                    lambdas.add((qs[a] - qs[b]) / (cs[a] - cs[b]))
    best = None
    for lam in sorted(lambdas):
        idx = []
        for cs, qs in zip(prob.cost, prob.qual):
            # maximize q - lam*c; ties to the cheaper option
            idx.append(max(range(len(cs)), key=lambda j: (qs[j] - lam * cs[j], -cs[j])))
        cost, qual = prob.evaluate(idx)
        if cost <= target + BUDGET_SLACK:
            if best is None or _better(qual, prob.qps(idx), best[1], prob.qps(best[0])):
                best = (idx, qual, lam)
    # lambda=inf picks every image's cheapest option, feasible once allocate() checked it
    return best


def _greedy_upgrade(prob: _Problem, idx: List[int], target: float) -> List[int]:
    idx = list(idx)
    cost, _ = prob.evaluate(idx)
    while True:
        move = None
        for i, (cs, qs) in enumerate(zip(prob.cost, prob.qual)):
            for j in range(len(cs)):
                dq = qs[j] - qs[idx[i]]
                dc = cs[j] - cs[idx[i]]
                if dq <= _TIE or cost + dc > target + BUDGET_SLACK:
                    continue
                score = dq / dc if dc > 0 else float("inf")
                if move is None or score > move[0]:
                    move = (score, i, j, dc)
        if move is None:
            return idx
        _, i, j, dc = move
        idx[i] = j
        cost += dc


def _branch_and_bound(prob: _Problem, target: float, incumbent: List[int], node_limit: int):
    n = len(prob.opts)
    best_idx = list(incumbent)
    best_q = prob.evaluate(best_idx)[1]
    best_qps = prob.qps(best_idx)
    nodes = 0
    exhausted = False
    # cheapest completion cost of images[k:]
    min_rest = [0.0] * (n + 1)
    for k in range(n - 1, -1, -1):
        min_rest[k] = min_rest[k + 1] + min(prob.cost[k])
    idx = [0] * n

    def dfs(k: int, cost: float, qual: float):
        nonlocal best_idx, best_q, best_qps, nodes, exhausted
        nodes += 1
        if nodes > node_limit:
            exhausted = True
            return
        if k == n:
            qps = prob.qps(idx)
            if _better(qual, qps, best_q, best_qps):
                best_idx, best_q, best_qps = list(idx), qual, qps
            return
        if cost + min_rest[k] > target + BUDGET_SLACK:
            return
        if qual + _lp_bound(prob, k, target - cost) < best_q - _TIE:
            return
        for j in range(len(prob.opts[k])):  # ascending QP
            c = cost + prob.cost[k][j]
            if c + min_rest[k + 1] > target + BUDGET_SLACK:
                continue
            idx[k] = j
            dfs(k + 1, c, qual + prob.qual[k][j])
            if exhausted:
                return

    dfs(0, 0.0, 0.0)
    return best_idx, not exhausted, nodes


def allocate(candidates: CandidateSet, target_bpp: float, budget_mode: str = "mean",
             node_limit: int = 2_000_000) -> AllocationPlan:
    """Choose one QP per image so the mean bpp fits `target_bpp` and mean quality is maximal.

    ``budget_mode="pooled"`` budgets total bits over total pixels instead of the
    mean of per-image bpp.
    """
    if not target_bpp > 0:
        raise ConfigError(f"target_bpp must be positive, got {target_bpp}")
    prob = _Problem(candidates, budget_mode)
    min_cost = sum(min(cs) for cs in prob.cost)
    if min_cost > target_bpp + BUDGET_SLACK:
        raise InfeasibleBudget(target_bpp, min_cost)

    idx, _, lam = _lagrangian_sweep(prob, target_bpp)
    idx = _greedy_upgrade(prob, idx, target_bpp)
    idx, exact, nodes = _branch_and_bound(prob, target_bpp, idx, node_limit)
    if not exact:
        log.warning("allocation search stopped after %d nodes; plan may be suboptimal", nodes)

    choices = {img: prob.opts[i][j].qp for i, (img, j) in enumerate(zip(prob.images, idx))}
    achieved = mean_bpp(choices, candidates) if budget_mode == "mean" else pooled_bpp(choices, candidates)
    return AllocationPlan(
        choices=choices,
        mean_bpp=achieved,
        mean_quality=mean_quality(choices, candidates),
        target_bpp=target_bpp,
        budget_mode=budget_mode,
        exact=exact,
        lagrange_multiplier=lam,
        nodes=nodes,
    )


# --- CSV I/O ---------------------------------------------------------------

def _data_lines(text: str, kind: str, version: int) -> List[str]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ConfigError(f"{kind} CSV lacks the '# msgdn-{kind} v{version}' header")
    tag = lines[0].lstrip("#").split()
    if tag != [f"msgdn-{kind}", f"v{version}"]:
        raise ConfigError(f"unsupported {kind} CSV header {lines[0]!r}")
    return [ln for ln in lines[1:] if ln.strip() and not ln.startswith("#")]


def read_candidates(path, quality_column: str = "quality_db") -> CandidateSet:
    rows = csv.DictReader(_data_lines(Path(path).read_text(), "candidates", CANDIDATES_VERSION))
    out = []
    for row in rows:
        if quality_column not in row:
            raise ConfigError(f"{path}: no column {quality_column!r}")
        out.append(Candidate(row["image"], int(row["qp"]), int(row["bits"]), int(row["width"]),
                             int(row["height"]), float(row[quality_column])))
    return CandidateSet(out)


def write_candidates(path, rows: Sequence[dict], extra_columns: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    buf.write(f"# msgdn-candidates v{CANDIDATES_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=CANDIDATE_COLUMNS + list(extra_columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def write_plan(path, plan: AllocationPlan, candidates: CandidateSet) -> None:
    buf = io.StringIO()
    buf.write(f"# msgdn-plan v{PLAN_VERSION}\n")
    buf.write(f"# target_bpp={plan.target_bpp!r} budget_mode={plan.budget_mode} "
              f"mean_bpp={plan.mean_bpp!r} mean_quality={plan.mean_quality!r} exact={plan.exact}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_COLUMNS)
    for img, qp in plan.choices.items():
        c = candidates.option(img, qp)
        w.writerow([img, qp, c.bits, c.width, c.height, repr(c.bpp), repr(c.quality_db)])
    Path(path).write_text(buf.getvalue())


def read_plan(path) -> Dict[str, int]:
    """Image -> chosen QP from a plan CSV."""
    rows = csv.DictReader(_data_lines(Path(path).read_text(), "plan", PLAN_VERSION))
    return {r["image"]: int(r["qp"]) for r in rows}
