"""Hinge-loss Markov random field over [0,1]-valued spam scores.

The four rule templates (negative prior, positive prior, member-to-hub and
hub-to-member propagation) are grounded into weighted hinge potentials
max(0, l)^p with l linear in the variables. MAP inference minimizes the
convex weighted sum by projected gradient descent; template weights can be
learned from labeled validation data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data_model import ConfigError, DataError
from .mrf import hub_id

log = logging.getLogger(__name__)


@dataclass
class HingeWeights:
    """Rule-template weights: all must be non-negative."""

    neg: float = 1.0
    prior: float = 1.0
    relation_c: dict = field(default_factory=dict)  # member-to-hub propagation
    relation_d: dict = field(default_factory=dict)  # hub-to-member propagation

    def c(self, relation: str) -> float:
        return self.relation_c.get(relation, 1.0)

    def d(self, relation: str) -> float:
        return self.relation_d.get(relation, 1.0)

    def validate(self, relations):
        values = [self.neg, self.prior]
        values += [self.c(r) for r in relations] + [self.d(r) for r in relations]
        if any(w < 0 for w in values):
            raise ConfigError("hinge template weights must be >= 0")

    def copy(self) -> "HingeWeights":
        return HingeWeights(self.neg, self.prior, dict(self.relation_c), dict(self.relation_d))

    def to_dict(self) -> dict:
        return {"neg": self.neg, "prior": self.prior,
                "relation_c": dict(self.relation_c), "relation_d": dict(self.relation_d)}

    @classmethod
    def from_dict(cls, d: dict) -> "HingeWeights":
        return cls(neg=d.get("neg", 1.0), prior=d.get("prior", 1.0),
                   relation_c=dict(d.get("relation_c", {})),
                   relation_d=dict(d.get("relation_d", {})))

    def of_template(self, template: tuple) -> float:
        kind = template[0]
        if kind == "neg":
            return self.neg
        if kind == "prior":
            return self.prior
        if kind == "c":
            return self.c(template[1])
        if kind == "d":
            return self.d(template[1])
        raise ConfigError(f"unknown template {template!r}")

    def set_template(self, template: tuple, value: float):
        kind = template[0]
        value = max(0.0, value)
        if kind == "neg":
            self.neg = value
        elif kind == "prior":
            self.prior = value
        elif kind == "c":
            self.relation_c[template[1]] = value
        elif kind == "d":
            self.relation_d[template[1]] = value
        else:
            raise ConfigError(f"unknown template {template!r}")


@dataclass(frozen=True)
class GroundHinge:
    coeffs: tuple  # ((var_index, coefficient), ...)
    const: float
    weight: float
    exponent: int
    template: tuple  # ("neg",) | ("prior",) | ("c", relation) | ("d", relation)
    tag: str  # human-readable provenance

    def linear_value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[j] for j, c in self.coeffs)

    def value(self, x: np.ndarray) -> float:
        return max(0.0, self.linear_value(x)) ** self.exponent


@dataclass
class GroundHingeModel:
    var_ids: list
    var_kinds: list  # "message" or "hub", aligned with var_ids
    potentials: list
    init: np.ndarray
    exponent: int

    def __post_init__(self):
        n_pot, n_var = len(self.potentials), len(self.var_ids)
        rows, cols, data = [], [], []
        for i, h in enumerate(self.potentials):
            for j, c in h.coeffs:
                rows.append(i)
                cols.append(j)
                data.append(c)
        self._A = sp.csr_matrix((data, (rows, cols)), shape=(n_pot, n_var))
        self._const = np.array([h.const for h in self.potentials])
        self._w = np.array([h.weight for h in self.potentials])

    @property
    def n_vars(self) -> int:
        return len(self.var_ids)

    def linear_values(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._A @ x).ravel() + self._const

    def objective(self, x: np.ndarray) -> float:
        active = np.maximum(0.0, self.linear_values(x))
        return float(self._w @ active ** self.exponent)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        active = np.maximum(0.0, self.linear_values(x))
        if self.exponent == 2:
            coef = 2.0 * self._w * active
        else:
            coef = self._w * (active > 0)
        return np.asarray(self._A.T @ coef).ravel()

    def potential_values(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(0.0, self.linear_values(x)) ** self.exponent

    def dump(self) -> str:
        lines = [f"var {k} {v}" for v, k in zip(self.var_ids, self.var_kinds)]
        for h in self.potentials:
            terms = " + ".join(f"{c:+g}*x[{j}]" for j, c in h.coeffs)
            lines.append(f"hinge w={h.weight:g} max(0, {h.const:+g} {terms})^{h.exponent}  [{h.tag}]")
        return "\n".join(lines)


def ground_rules(priors: dict, groups: list, weights: HingeWeights, p: int = 2,
                 observed: dict | None = None) -> GroundHingeModel:
    """Instantiate the rule templates over grouped messages and their hubs.

    Messages in `observed` are fixed constants rather than variables: they
    contribute evidence through the relational hinges but get no prior hinges
    of their own.
    """
    if p not in (1, 2):
        raise ConfigError(f"hinge exponent must be 1 or 2, got {p}")
    observed = observed or {}
    weights.validate(sorted({g.relation for g in groups}))

    grouped = sorted({mid for g in groups for mid in g.member_ids})
    missing = [mid for mid in grouped if mid not in priors and mid not in observed]
    if missing:
        raise DataError(f"{len(missing)} grouped messages lack priors (first: {missing[0]})")

    free = [mid for mid in grouped if mid not in observed]
    var_ids = list(free)
    var_kinds = ["message"] * len(free)
    index = {mid: j for j, mid in enumerate(free)}
    init = [min(max(priors[mid], 0.0), 1.0) for mid in free]

    potentials = []
    for mid in free:
        pr = min(max(priors[mid], 0.0), 1.0)
        potentials.append(GroundHinge(coeffs=((index[mid], 1.0),), const=0.0,
                                      weight=weights.neg, exponent=p,
                                      template=("neg",), tag=f"neg:{mid}"))
        potentials.append(GroundHinge(coeffs=((index[mid], -1.0),), const=pr,
                                      weight=weights.prior, exponent=p,
                                      template=("prior",), tag=f"prior:{mid}"))

    for g in groups:
        h_idx = len(var_ids)
        hid = hub_id(g.relation, g.key)
        var_ids.append(hid)
        var_kinds.append("hub")
        member_values = [observed.get(mid, priors.get(mid, 0.5)) for mid in g.member_ids]
        init.append(float(np.mean(member_values)))
        w_c, w_d = weights.c(g.relation), weights.d(g.relation)
        for mid in g.member_ids:
            if mid in observed:
                v = float(observed[mid])
                c_coeffs, c_const = ((h_idx, -1.0),), v
                d_coeffs, d_const = ((h_idx, 1.0),), -v
            else:
                c_coeffs, c_const = ((index[mid], 1.0), (h_idx, -1.0)), 0.0
                d_coeffs, d_const = ((h_idx, 1.0), (index[mid], -1.0)), 0.0
            potentials.append(GroundHinge(coeffs=c_coeffs, const=c_const, weight=w_c,
                                          exponent=p, template=("c", g.relation),
                                          tag=f"c:{g.relation}:{g.key}:{mid}"))
            potentials.append(GroundHinge(coeffs=d_coeffs, const=d_const, weight=w_d,
                                          exponent=p, template=("d", g.relation),
                                          tag=f"d:{g.relation}:{g.key}:{mid}"))

    return GroundHingeModel(var_ids=var_ids, var_kinds=var_kinds, potentials=potentials,
                            init=np.clip(np.array(init, dtype=float), 0.0, 1.0), exponent=p)


@dataclass
class MapResult:
    assignment: dict  # variable id -> value in [0, 1]
    x: np.ndarray
    objective: float
    converged: bool
    n_iters: int


def map_inference(model: GroundHingeModel, tol: float = 1e-6, max_iter: int = 5000,
                  step: float = 1.0) -> MapResult:
    """Projected (sub)gradient descent on the box [0,1]^n.

    Deterministic: starts from the priors (hubs at the mean of member priors).
    The smooth p=2 objective uses a fixed step halved on non-improvement; for
    p=1 a chosen subgradient need not be a descent direction at a kink, so a
    diminishing-step schedule runs instead and the best iterate is kept.
    """
    if model.exponent == 1:
        return _map_subgradient(model, tol, max_iter, step)
    x = model.init.copy()
    f = model.objective(x)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = model.gradient(x)
        improved = False
        while step > 1e-15:
            x_new = np.clip(x - step * g, 0.0, 1.0)
            f_new = model.objective(x_new)
            if f_new < f:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        if f - f_new < tol and np.max(np.abs(x_new - x)) < np.sqrt(tol):
            x, f = x_new, f_new
            converged = True
            break
        x, f = x_new, f_new
    if not converged:
        log.warning("MAP inference hit max_iter=%d", max_iter)
    assignment = {vid: float(v) for vid, v in zip(model.var_ids, x)}
    return MapResult(assignment=assignment, x=x, objective=f, converged=converged, n_iters=it)


def _map_subgradient(model: GroundHingeModel, tol: float, max_iter: int, step: float):
    x = model.init.copy()
    best_x = x.copy()
    best_f = model.objective(x)
    last_gain_iter = 0
    it = 0
    for it in range(1, max_iter + 1):
        g = model.gradient(x)
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            break
        x = np.clip(x - (step / (np.sqrt(it) * gnorm)) * g, 0.0, 1.0)
        f = model.objective(x)
        if f < best_f - tol:
            best_f = f
            best_x = x.copy()
            last_gain_iter = it
        if it - last_gain_iter > 200:
            break
    converged = it < max_iter
    if not converged:
        log.warning("MAP inference hit max_iter=%d", max_iter)
    assignment = {vid: float(v) for vid, v in zip(model.var_ids, best_x)}
    return MapResult(assignment=assignment, x=best_x, objective=best_f,
                     converged=converged, n_iters=it)


def infer_hinge_posteriors(priors: dict, groups: list, weights: HingeWeights | None = None,
                           p: int = 2, observed: dict | None = None,
                           tol: float = 1e-9, max_iter: int = 5000):
    """Joint PSL-style scores: MAP values for grouped messages, priors otherwise."""
    weights = weights or HingeWeights()
    model = ground_rules(priors, groups, weights, p=p, observed=observed)
    result = map_inference(model, tol=tol, max_iter=max_iter)
    scores = dict(priors)
    for vid, kind in zip(model.var_ids, model.var_kinds):
        if kind == "message":
            scores[vid] = result.assignment[vid]
    return scores, result


def _template_sums(model: GroundHingeModel, x: np.ndarray) -> dict:
    # unweighted hinge values summed per template (the likelihood-gradient features)
    values = model.potential_values(x)
    sums: dict = {}
    for h, v in zip(model.potentials, values):
        sums[h.template] = sums.get(h.template, 0.0) + float(v)
    return sums


def learn_weights(init: HingeWeights, messages: list, groups: list, priors: dict,
                  steps: int = 10, learning_rate: float = 0.05, p: int = 2):
    """Approximate likelihood ascent for the template weights.

    The gradient of each template weight is the template's summed hinge value
    at the current MAP state minus its value at the observed state (gold
    labels, hubs imputed as member means); weights are projected to >= 0.
    Returns (weights, objective_trace).
    """
    labels = {m.id: m.label for m in messages if m.label is not None}
    if not labels:
        log.warning("no labeled validation data; returning initial weights")
        return init.copy(), []

    weights = init.copy()
    trace = []
    for _ in range(steps):
        model = ground_rules(priors, groups, weights, p=p)
        observed_x = np.array([
            float(labels.get(vid, priors.get(vid, 0.5))) if kind == "message" else 0.0
            for vid, kind in zip(model.var_ids, model.var_kinds)
        ])
        # hubs observed as the mean of their members' observed values
        pos = {vid: j for j, vid in enumerate(model.var_ids)}
        for g in groups:
            hid = hub_id(g.relation, g.key)
            if hid in pos:
                vals = [float(labels.get(mid, priors.get(mid, 0.5))) for mid in g.member_ids]
                observed_x[pos[hid]] = float(np.mean(vals))

        map_state = map_inference(model, tol=1e-9, max_iter=5000)
        phi_map = _template_sums(model, map_state.x)
        phi_obs = _template_sums(model, observed_x)
        trace.append(map_state.objective - model.objective(observed_x))
        for template in sorted(set(phi_map) | set(phi_obs)):
            grad = phi_map.get(template, 0.0) - phi_obs.get(template, 0.0)
            weights.set_template(template, weights.of_template(template) + learning_rate * grad)
    return weights, trace
