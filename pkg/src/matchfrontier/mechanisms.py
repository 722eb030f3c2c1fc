"""Baseline matching mechanisms and the Birkhoff-von-Neumann decomposition.

Agents are addressed by side and index; in priority orders, workers are
0..n-1 and firms are n..n+m-1.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from enum import Enum

import networkx as nx
import numpy as np

from .prefs import BOTTOM, PreferenceProfile, format_profile

MARGINAL_TOL = 1e-9

# rsd_exact enumerates (n+m)! priority orders; 8! = 40320 is the default limit.
DEFAULT_RSD_CAP = 8


class InvalidMatchingError(ValueError):
    """A matching or marginal matrix violates its invariants."""


class EnumerationCapError(ValueError):
    """Exact enumeration refused; market too large."""


class Proposing(Enum):
    WORKERS = "workers"
    FIRMS = "firms"


@dataclass(frozen=True)
class DeterministicMatching:
    pairs: frozenset  # of (worker index, firm index); unmatched agents implicit
    n: int
    m: int

    def __post_init__(self):
        ws = [w for w, _ in self.pairs]
        fs = [f for _, f in self.pairs]
        if len(set(ws)) != len(ws) or len(set(fs)) != len(fs):
            raise InvalidMatchingError("agent matched more than once")
        if any(not (0 <= w < self.n and 0 <= f < self.m) for w, f in self.pairs):
            raise InvalidMatchingError("pair index out of range")

    def worker_partner(self, w: int) -> int:
        """Matched firm index or BOTTOM."""
        for ww, f in self.pairs:
            if ww == w:
                return f
        return BOTTOM

    def firm_partner(self, f: int) -> int:
        for w, ff in self.pairs:
            if ff == f:
                return w
        return BOTTOM

    def to_marginals(self) -> "RandomizedMatching":
        r = np.zeros((self.n, self.m))
        for w, f in self.pairs:
            r[w, f] = 1.0
        return RandomizedMatching(r)


@dataclass(frozen=True)
class RandomizedMatching:
    """n x m marginal match probabilities; weakly doubly stochastic."""

    r: np.ndarray

    def validate(self, eps: float = MARGINAL_TOL) -> None:
        if self.r.ndim != 2:
            raise InvalidMatchingError("marginal matrix must be 2-D")
        if np.any(self.r < -eps) or np.any(self.r > 1 + eps):
            raise InvalidMatchingError("marginals outside [0, 1]")
        if np.any(self.r.sum(axis=1) > 1 + eps):
            raise InvalidMatchingError("worker row sum exceeds 1")
        if np.any(self.r.sum(axis=0) > 1 + eps):
            raise InvalidMatchingError("firm column sum exceeds 1")

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def m(self) -> int:
        return self.r.shape[1]

    def unmatched_workers(self) -> np.ndarray:
        """Derived margins g_{w,bottom} = 1 - row sums."""
        return 1.0 - self.r.sum(axis=1)

    def unmatched_firms(self) -> np.ndarray:
        return 1.0 - self.r.sum(axis=0)


def da(profile: PreferenceProfile, proposing: Proposing = Proposing.WORKERS
       ) -> DeterministicMatching:
    """Deferred acceptance.  Proposers iterate in ascending index order each
    round; rejection shrinks the proposer's remaining list, so termination
    is guaranteed.  Output is stable w.r.t. the reported profile."""
    if proposing is Proposing.WORKERS:
        prop_orders, recv_orders = profile.workers, profile.firms
    else:
        prop_orders, recv_orders = profile.firms, profile.workers
    np_, nr = len(prop_orders), len(recv_orders)

    remaining = [list(o.acceptable()) for o in prop_orders]
    held = [None] * nr  # receiver -> tentatively accepted proposer
    free = list(range(np_))
    while True:
        proposals = {}  # receiver -> list of proposers this round
        for p in free:
            if remaining[p]:
                proposals.setdefault(remaining[p][0], []).append(p)
        if not proposals:
            break
        for recv, props in sorted(proposals.items()):
            candidates = props + ([held[recv]] if held[recv] is not None else [])
            acceptable = [c for c in candidates if recv_orders[recv].is_acceptable(c)]
            best = min(acceptable, key=recv_orders[recv].rank_of) if acceptable else None
            for c in candidates:
                if c != best:
                    remaining[c].remove(recv)
            held[recv] = best
        free = [p for p in range(np_) if all(held[r] != p for r in range(nr))]
        if not free:
            break

    if proposing is Proposing.WORKERS:
        pairs = frozenset((w, f) for f, w in enumerate(held) if w is not None)
    else:
        pairs = frozenset((w, f) for w, f in enumerate(held) if f is not None)
    return DeterministicMatching(pairs, profile.n, profile.m)


def serial_dictatorship_round(profile: PreferenceProfile, priority
                              ) -> DeterministicMatching:
    """One serial-dictatorship pass: each agent, in priority order, takes its
    most preferred remaining acceptable partner (final once made)."""
    n, m = profile.n, profile.m
    if sorted(priority) != list(range(n + m)):
        raise ValueError("priority must be a permutation of all n+m agents")
    matched_w = [False] * n
    matched_f = [False] * m
    pairs = []
    for agent in priority:
        if agent < n:
            w = agent
            if matched_w[w]:
                continue
            for f in profile.workers[w].acceptable():
                if not matched_f[f]:
                    pairs.append((w, f))
                    matched_w[w] = True
                    matched_f[f] = True
                    break
        else:
            f = agent - n
            if matched_f[f]:
                continue
            for w in profile.firms[f].acceptable():
                if not matched_w[w]:
                    pairs.append((w, f))
                    matched_w[w] = True
                    matched_f[f] = True
                    break
    return DeterministicMatching(frozenset(pairs), n, m)


def rsd_exact(profile: PreferenceProfile, cap: int = DEFAULT_RSD_CAP
              ) -> RandomizedMatching:
    """Exact RSD marginals: average over all (n+m)! priority orders."""
    n, m = profile.n, profile.m
    if n + m > cap:
        raise EnumerationCapError(
            f"(n+m)! = {math.factorial(n + m)} priority orders exceeds cap"
            f" (n+m={n + m} > {cap}); use rsd_monte_carlo")
    w_pref = [list(o.acceptable()) for o in profile.workers]
    f_pref = [list(o.acceptable()) for o in profile.firms]
    counts = np.zeros((n, m), dtype=np.float64)
    for priority in itertools.permutations(range(n + m)):
        matched_w = [False] * n
        matched_f = [False] * m
        for agent in priority:
            if agent < n:
                if matched_w[agent]:
                    continue
                for f in w_pref[agent]:
                    if not matched_f[f]:
                        counts[agent, f] += 1.0
                        matched_w[agent] = True
                        matched_f[f] = True
                        break
            else:
                f = agent - n
                if matched_f[f]:
                    continue
                for w in f_pref[f]:
                    if not matched_w[w]:
                        counts[w, f] += 1.0
                        matched_w[w] = True
                        matched_f[f] = True
                        break
    return RandomizedMatching(counts / math.factorial(n + m))


def rsd_monte_carlo(profile: PreferenceProfile, samples: int,
                    rng: np.random.Generator) -> RandomizedMatching:
    """Empirical RSD marginals over `samples` sampled priority orders.
    Estimates are clipped into [0, 1] per entry and never renormalized."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n, m = profile.n, profile.m
    counts = np.zeros((n, m), dtype=np.float64)
    for _ in range(samples):
        priority = rng.permutation(n + m)
        matching = serial_dictatorship_round(profile, list(priority))
        for w, f in matching.pairs:
            counts[w, f] += 1.0
    return RandomizedMatching(np.clip(counts / samples, 0.0, 1.0))


@dataclass(frozen=True)
class BvnDecomposition:
    components: tuple  # of (weight, DeterministicMatching)

    def reconstruct(self) -> np.ndarray:
        n = self.components[0][1].n
        m = self.components[0][1].m
        acc = np.zeros((n, m))
        for weight, matching in self.components:
            acc += weight * matching.to_marginals().r
        return acc


def bvn_decompose(rm: RandomizedMatching, tol: float = MARGINAL_TOL
                  ) -> BvnDecomposition:
    """Decompose a weakly doubly stochastic marginal matrix into a convex
    combination of deterministic matchings.

    Classical Birkhoff extraction with per-agent slack: every worker is
    covered either by a positive pair or by its unmatched margin (and
    likewise for firms), so each step admits a perfect cover of the real
    agents on the positive support.  The residual after all pairs are
    exhausted becomes one empty-matching component.
    """
    rm.validate()
    n, m = rm.n, rm.m
    r = np.clip(rm.r.copy(), 0.0, 1.0)
    gw = np.clip(rm.unmatched_workers(), 0.0, 1.0)
    gf = np.clip(rm.unmatched_firms(), 0.0, 1.0)

    support_tol = 1e-12
    components = []
    total = 0.0
    while np.any(r > support_tol):
        # Edge weight = number of real agents the edge covers, so a
        # max-weight matching covers every worker and firm (a full
        # fractional cover exists, hence an integral one).
        graph = nx.Graph()
        graph.add_nodes_from([("w", w) for w in range(n)] + [("bw", w) for w in range(n)])
        graph.add_nodes_from([("f", f) for f in range(m)] + [("bf", f) for f in range(m)])
        for w in range(n):
            for f in range(m):
                if r[w, f] > support_tol:
                    graph.add_edge(("w", w), ("f", f), weight=2)
        for w in range(n):
            if gw[w] > support_tol or r[w].sum() <= support_tol:
                graph.add_edge(("w", w), ("bw", w), weight=1)
        for f in range(m):
            if gf[f] > support_tol or r[:, f].sum() <= support_tol:
                graph.add_edge(("bf", f), ("f", f), weight=1)
        matching = dict(nx.max_weight_matching(graph))
        matching.update({v: k for k, v in matching.items()})

        pairs = []
        slack_w, slack_f = [], []
        for w in range(n):
            mate = matching.get(("w", w))
            if mate is None:
                raise InvalidMatchingError("no perfect cover on positive support")
            if mate[0] == "f":
                pairs.append((w, mate[1]))
            else:
                slack_w.append(w)
        for f in range(m):
            mate = matching.get(("f", f))
            if mate is None:
                raise InvalidMatchingError("no perfect cover on positive support")
            if mate[0] == "bf":
                slack_f.append(f)

        used = [r[w, f] for w, f in pairs]
        used += [gw[w] for w in slack_w] + [gf[f] for f in slack_f]
        delta = min(used)
        if delta <= 0.0:
            raise InvalidMatchingError("degenerate extraction step")
        for w, f in pairs:
            r[w, f] -= delta
            if r[w, f] < support_tol:
                r[w, f] = 0.0
        for w in slack_w:
            gw[w] = max(gw[w] - delta, 0.0)
        for f in slack_f:
            gf[f] = max(gf[f] - delta, 0.0)
        components.append((delta, DeterministicMatching(frozenset(pairs), n, m)))
        total += delta

    if 1.0 - total > tol:
        components.append((1.0 - total, DeterministicMatching(frozenset(), n, m)))
    else:
        # absorb float dust so weights sum to exactly 1
        weight, matching = components[-1]
        components[-1] = (weight + (1.0 - total), matching)
    return BvnDecomposition(tuple(components))


class MechanismKind(Enum):
    WDA = "wda"
    FDA = "fda"
    RSD = "rsd"


class LiftedMechanism:
    """Uniform profile -> RandomizedMatching interface over the baselines."""

    def __init__(self, kind: MechanismKind, rsd_cap: int = DEFAULT_RSD_CAP,
                 mc_samples: int = 200_000):
        self.kind = kind
        self.label = kind.value
        self.rsd_cap = rsd_cap
        self.mc_samples = mc_samples

    def evaluate(self, profile: PreferenceProfile) -> RandomizedMatching:
        if self.kind is MechanismKind.WDA:
            return da(profile, Proposing.WORKERS).to_marginals()
        if self.kind is MechanismKind.FDA:
            return da(profile, Proposing.FIRMS).to_marginals()
        if profile.n + profile.m <= self.rsd_cap:
            return rsd_exact(profile, cap=self.rsd_cap)
        # deterministic per profile: seed the sampler from the profile text
        digest = hashlib.sha256(format_profile(profile).encode()).digest()
        key = [int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:16], "little")]
        rng = np.random.Generator(np.random.Philox(key=key))
        return rsd_monte_carlo(profile, self.mc_samples, rng)

    def __call__(self, profile: PreferenceProfile) -> RandomizedMatching:
        return self.evaluate(profile)


def lift_mechanism(kind: MechanismKind, **kwargs) -> LiftedMechanism:
    return LiftedMechanism(kind, **kwargs)


# ---------------------------------------------------------------------------
# Matching sidecar format: one line per profile, pairs as w<i>:f<j> tokens
# separated by spaces, w<i>:_ for an unmatched worker.

def format_matching(matching: DeterministicMatching) -> str:
    tokens = []
    for w in range(matching.n):
        f = matching.worker_partner(w)
        tokens.append(f"w{w + 1}:_" if f == BOTTOM else f"w{w + 1}:f{f + 1}")
    return " ".join(tokens)


def parse_matching(line: str, n: int, m: int) -> DeterministicMatching:
    pairs = []
    for token in line.split():
        left, _, right = token.partition(":")
        w = int(left[1:]) - 1
        if right != "_":
            pairs.append((w, int(right[1:]) - 1))
    return DeterministicMatching(frozenset(pairs), n, m)
