"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet

DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_group: dict = field(default_factory=dict)  # group -> max rel err
    checked: int = 0
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(build_loss, pset: ParamSet, eps: float = 1e-5,
               samples_per_group: int = 200, seed: int = 0,
               tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    build_loss(leaves) must construct a scalar loss Node from the leaf
    nodes of pset. For each non-frozen group, up to samples_per_group
    randomly chosen scalar parameters are perturbed by +-eps. The relative
    error uses a small floor so vanishing gradients compare absolutely."""
    rng = np.random.default_rng(seed)
    leaves = pset.leaves()
    loss = build_loss(leaves)
    loss.backward()
    analytic = {(g, t): leaves[g][t].grad for g in leaves for t in leaves[g]}

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for gname, group in pset.groups.items():
        if group.frozen:
            continue
        flat_index = [(tname, i) for tname, t in group.tensors.items()
                      for i in range(t.size)]
        if len(flat_index) > samples_per_group:
            picks = rng.choice(len(flat_index), size=samples_per_group, replace=False)
            flat_index = [flat_index[i] for i in sorted(picks)]
        worst = 0.0
        for tname, i in flat_index:
            theta = group.tensors[tname]
            orig = theta.flat[i]
            theta.flat[i] = orig + eps
            f_plus = float(build_loss(pset.leaves()).val)
            theta.flat[i] = orig - eps
            f_minus = float(build_loss(pset.leaves()).val)
            theta.flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[(gname, tname)].flat[i])
            rel = abs(a - numeric) / max(1e-4, abs(a), abs(numeric))
            worst = max(worst, rel)
            report.checked += 1
        report.per_group[gname] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
