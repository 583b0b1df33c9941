"""Theory verification: exact mutual information on discrete joints and rate checks.

The information-gap checker compares the average best-subset mutual
information of per-client feature sets against the global intersection plus
the heterogeneity bonus p * delta. Joints are exact finite distributions, so
every quantity is computed by enumeration, in nats.

The convergence diagnostic fits a log-log slope to the running minimum of a
squared-gradient-norm series; the expected decay for the federated loop here
is at least t^(-2/3)-like, so acceptance checks slope <= -0.3 (loose, since
the theoretical rate is only an upper bound).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

LN2 = math.log(2.0)


class AnalysisError(Exception):
    pass


class CapacityError(AnalysisError):
    pass


class Theorem1SpecError(AnalysisError):
    pass


def to_bits(nats: float) -> float:
    return nats / LN2


@dataclass(frozen=True)
class DiscreteJoint:
    """Finite joint distribution of a label and a feature tuple."""

    outcomes: tuple[tuple[int, tuple[int, ...]], ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        outcomes = tuple((int(y), tuple(int(f) for f in fs)) for y, fs in self.outcomes)
        object.__setattr__(self, "outcomes", outcomes)
        if len(outcomes) != probs.size:
            raise AnalysisError("need one probability per outcome")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-12:
            raise AnalysisError("probabilities must be non-negative and sum to 1")
        widths = {len(fs) for _, fs in outcomes}
        if len(widths) > 1:
            raise AnalysisError("all outcomes must have the same number of features")

    @property
    def num_features(self) -> int:
        return len(self.outcomes[0][1]) if self.outcomes else 0


def mutual_information_exact(joint: DiscreteJoint, feature_subset) -> float:
    """I(Y; S) in nats by exact marginalization onto the feature subset."""
    subset = tuple(sorted(set(int(i) for i in feature_subset)))
    if any(i < 0 or i >= joint.num_features for i in subset):
        raise AnalysisError(f"feature index out of range in {subset}")
    if not subset:
        return 0.0
    p_ys: dict[tuple, float] = {}
    for (y, fs), p in zip(joint.outcomes, joint.probs):
        if p == 0.0:
            continue
        key = (y, tuple(fs[i] for i in subset))
        p_ys[key] = p_ys.get(key, 0.0) + float(p)
    p_y: dict[int, float] = {}
    p_s: dict[tuple, float] = {}
    for (y, s), p in p_ys.items():
        p_y[y] = p_y.get(y, 0.0) + p
        p_s[s] = p_s.get(s, 0.0) + p
    mi = 0.0
    for (y, s), p in p_ys.items():
        mi += p * math.log(p / (p_y[y] * p_s[s]))
    return max(mi, 0.0)


def best_subset_mi(joint: DiscreteJoint, candidate_features) -> tuple[tuple[int, ...], float]:
    """Exhaustive argmax of I(Y; S) over subsets of the candidates.

    Ties (within 1e-12) resolve to the smallest subset, then lexicographic.
    The empty subset (MI 0) is a valid candidate.
    """
    candidates = tuple(sorted(set(int(i) for i in candidate_features)))
    if len(candidates) > 20:
        raise CapacityError(f"exhaustive search over {len(candidates)} features is too large")
    best: tuple[int, ...] = ()
    best_mi = 0.0
    for size in range(1, len(candidates) + 1):
        for subset in combinations(candidates, size):
            mi = mutual_information_exact(joint, subset)
            if mi > best_mi + 1e-12:
                best, best_mi = subset, mi
    return best, best_mi


@dataclass(frozen=True)
class ClientFeatureSpec:
    """One client's invariant feature indices and its client-specific extras."""

    invariant_features: frozenset[int]
    extra_features: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "invariant_features", frozenset(int(i) for i in self.invariant_features))
        object.__setattr__(self, "extra_features", frozenset(int(i) for i in self.extra_features))


def global_intersection(specs: Sequence[ClientFeatureSpec]) -> frozenset[int]:
    phi_g = specs[0].invariant_features
    for s in specs[1:]:
        phi_g = phi_g & s.invariant_features
    return phi_g


@dataclass(frozen=True)
class Theorem1Report:
    lhs: float
    rhs: float
    p: float
    delta: float
    holds: bool
    applicable: bool
    note: str
    per_client: tuple[dict, ...]


def theorem1_gap(
    client_specs: Sequence[ClientFeatureSpec],
    joints: "DiscreteJoint | Sequence[DiscreteJoint]",
) -> Theorem1Report:
    """Check mean I(Y; best personalized subset) >= mean I(Y; best global subset) + p*delta.

    `joints` may be a single shared joint or one per client. delta is the
    smallest per-heterogeneous-client max-subset MI of the extra features (the
    tightest constant the bound supports); clients whose declared extras break
    the structural conditions make the spec inapplicable rather than failing.
    """
    n = len(client_specs)
    if n < 1:
        raise AnalysisError("need at least one client")
    if isinstance(joints, DiscreteJoint):
        joints = [joints] * n
    if len(joints) != n:
        raise AnalysisError("need one joint per client (or a single shared joint)")

    phi_g = global_intersection(client_specs)
    per_client = []
    deltas = []
    inapplicable = []
    lhs_terms = []
    rhs_terms = []
    for j, (spec, joint) in enumerate(zip(client_specs, joints)):
        subset_i, mi_i = best_subset_mi(joint, spec.invariant_features)
        subset_g, mi_g = best_subset_mi(joint, phi_g)
        lhs_terms.append(mi_i)
        rhs_terms.append(mi_g)
        entry = {
            "client": j,
            "phi_star": subset_i,
            "mi_personalized": mi_i,
            "mi_global": mi_g,
            "delta_j": None,
        }
        z = spec.extra_features
        if z:
            inter_others = None
            for i in range(n):
                if i != j:
                    phi_i = client_specs[i].invariant_features
                    inter_others = phi_i if inter_others is None else inter_others & phi_i
            if not z <= spec.invariant_features:
                inapplicable.append(f"client {j}: extras not within its invariant set")
            elif inter_others is not None and z <= inter_others:
                inapplicable.append(f"client {j}: extras contained in the other clients' intersection")
            else:
                _, delta_j = best_subset_mi(joint, z)
                entry["delta_j"] = delta_j
                if delta_j <= 1e-12:
                    inapplicable.append(f"client {j}: extras carry no information about Y")
                else:
                    deltas.append(delta_j)
        per_client.append(entry)

    lhs = float(np.mean(lhs_terms))
    rhs_base = float(np.mean(rhs_terms))
    if inapplicable:
        return Theorem1Report(
            lhs, rhs_base, 0.0, 0.0, holds=False, applicable=False,
            note="; ".join(inapplicable), per_client=tuple(per_client),
        )
    k = len(deltas)
    if k == 0:
        return Theorem1Report(
            lhs, rhs_base, 0.0, 0.0, holds=True, applicable=True,
            note="degenerate: no heterogeneous clients, bound reduces to equality",
            per_client=tuple(per_client),
        )
    p = k / n
    delta = min(deltas)
    rhs = rhs_base + p * delta
    holds = lhs >= rhs - 1e-12
    return Theorem1Report(lhs, rhs, p, delta, holds, True, "", tuple(per_client))


# ---------------------------------------------------------------------------
# Random conforming specs (features mutually independent, so the additive
# decomposition behind the gap bound is valid by construction)
# ---------------------------------------------------------------------------


def random_assumption1_spec(
    rng: np.random.Generator,
    max_clients: int = 4,
    max_features: int = 6,
) -> tuple[list[ClientFeatureSpec], DiscreteJoint]:
    """Sample a discrete SEM satisfying the heterogeneity/informativeness structure.

    Features are independent Bernoulli sources and the label is a logistic
    function of the informative ones, which guarantees every nonempty subset
    of extras is informative and the personalized-vs-global MI gap bound holds.
    """
    n_clients = int(rng.integers(2, max_clients + 1))
    n_global = int(rng.integers(1, 3))
    n_hetero = int(rng.integers(1, n_clients))
    pool = max_features - n_global
    extras_per = []
    for _ in range(n_hetero):
        take = int(rng.integers(1, min(2, pool) + 1)) if pool > 0 else 0
        extras_per.append(take)
        pool -= take
    n_features = n_global + sum(extras_per)

    global_idx = frozenset(range(n_global))
    specs = []
    offset = n_global
    hetero_ids = rng.permutation(n_clients)[:n_hetero]
    extras_by_client = {}
    for cid, take in zip(hetero_ids, extras_per):
        extras_by_client[int(cid)] = frozenset(range(offset, offset + take))
        offset += take
    for cid in range(n_clients):
        z = extras_by_client.get(cid, frozenset())
        specs.append(ClientFeatureSpec(global_idx | z, z))

    marginals = rng.uniform(0.3, 0.7, n_features)
    weights = rng.uniform(0.4, 1.2, n_features) * rng.choice([-1.0, 1.0], n_features)

    outcomes = []
    probs = []
    for mask in range(2**n_features):
        fs = tuple((mask >> i) & 1 for i in range(n_features))
        p_f = float(np.prod([m if f else 1 - m for m, f in zip(marginals, fs)]))
        score = float(np.dot(weights, [2 * f - 1 for f in fs]))
        p1 = 1.0 / (1.0 + math.exp(-score))
        outcomes.append((1, fs))
        probs.append(p_f * p1)
        outcomes.append((0, fs))
        probs.append(p_f * (1 - p1))
    total = sum(probs)
    return specs, DiscreteJoint(tuple(outcomes), np.asarray(probs) / total)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


def convergence_slope(series: Sequence[float]) -> float:
    """Log-log least-squares slope of the running minimum of the series.

    The running minimum is the empirical proxy for a best-iterate bound.
    Requires >= 10 positive values.
    """
    values = np.asarray(series, dtype=np.float64)
    if values.size < 10:
        raise AnalysisError(f"need at least 10 points, got {values.size}")
    if (values <= 0).any():
        raise AnalysisError("series must be strictly positive")
    running_min = np.minimum.accumulate(values)
    t = np.arange(1, values.size + 1, dtype=np.float64)
    slope = np.polyfit(np.log(t), np.log(running_min), 1)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# Spec-file format (see README for the schema)
# ---------------------------------------------------------------------------


def load_theorem1_spec(path) -> tuple[list[ClientFeatureSpec], DiscreteJoint]:
    """Parse a structured-text description of clients, features, and the joint."""
    feature_names: list[str] | None = None
    specs: list[ClientFeatureSpec] = []
    outcomes = []
    probs = []
    in_joint = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue

            def err(msg):
                return Theorem1SpecError(f"{path}:{lineno}: {msg}")

            if in_joint:
                parts = line.split()
                if feature_names is None:
                    raise err("joint rows before a 'features:' line")
                if len(parts) != len(feature_names) + 2:
                    raise err(
                        f"expected y, {len(feature_names)} feature values, prob; got {len(parts)} fields"
                    )
                try:
                    y = int(parts[0])
                    fs = tuple(int(v) for v in parts[1:-1])
                    p = float(parts[-1])
                except ValueError as exc:
                    raise err(f"bad joint row: {exc}") from exc
                outcomes.append((y, fs))
                probs.append(p)
            elif line.startswith("features:"):
                feature_names = line[len("features:"):].split()
                if not feature_names:
                    raise err("empty feature list")
            elif line.startswith("client:"):
                if feature_names is None:
                    raise err("'client:' line before 'features:'")
                body = line[len("client:"):]
                phi_part, _, z_part = body.partition("|")
                def parse_side(text, label):
                    text = text.strip()
                    if not text.startswith(label + " ="):
                        raise err(f"expected '{label} = ...' in client line")
                    names = text[len(label) + 2 :].split()
                    idx = set()
                    for name in names:
                        if name not in feature_names:
                            raise err(f"unknown feature {name!r}")
                        idx.add(feature_names.index(name))
                    return frozenset(idx)
                phi = parse_side(phi_part, "phi")
                z = parse_side(z_part, "z") if z_part.strip() else frozenset()
                specs.append(ClientFeatureSpec(phi, z))
            elif line.startswith("joint:"):
                in_joint = True
            else:
                raise err(f"unrecognized line {line!r}")
    if feature_names is None or not specs:
        raise Theorem1SpecError(f"{path}: spec must declare features and at least one client")
    if not outcomes:
        raise Theorem1SpecError(f"{path}: spec is missing the joint table")
    try:
        joint = DiscreteJoint(tuple(outcomes), np.asarray(probs))
    except AnalysisError as exc:
        raise Theorem1SpecError(f"{path}: invalid joint: {exc}") from exc
    return specs, joint
