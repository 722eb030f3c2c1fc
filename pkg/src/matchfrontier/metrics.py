"""Quantitative evaluation of randomized matchings and mechanisms:
stability violation, IR violation, FOSD regret, welfare, similarity to
deferred acceptance, and normalized entropy."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .prefs import (AgentId, EncodedProfile, PreferenceProfile, Side, encode,
                    enumerate_misreports)
from .mechanisms import Proposing, RandomizedMatching, da


@dataclass(frozen=True)
class EvalReport:
    stv: float
    rgt: float
    irv: float
    welfare_per_agent: float
    sim: float
    entropy: float
    profiles_evaluated: int


def _check_dims(r: RandomizedMatching, enc: EncodedProfile) -> None:
    if r.r.shape != enc.p.shape:
        raise ValueError(f"marginal shape {r.r.shape} != encoding shape {enc.p.shape}")


def stv_pair(r: RandomizedMatching, enc: EncodedProfile, w: int, f: int) -> float:
    """Stability violation of one (worker, firm) pair: the product of the
    firm-side and worker-side envy masses."""
    _check_dims(r, enc)
    g_bot_f = 1.0 - r.r[:, f].sum()
    g_w_bot = 1.0 - r.r[w, :].sum()
    firm_side = (r.r[:, f] * np.maximum(enc.q[w, f] - enc.q[:, f], 0.0)).sum() \
        + g_bot_f * max(enc.q[w, f], 0.0)
    worker_side = (r.r[w, :] * np.maximum(enc.p[w, f] - enc.p[w, :], 0.0)).sum() \
        + g_w_bot * max(enc.p[w, f], 0.0)
    return firm_side * worker_side


def stv_profile(r: RandomizedMatching, enc: EncodedProfile) -> float:
    """Average stability violation: 1/2 (1/m + 1/n) * sum of pair terms."""
    _check_dims(r, enc)
    n, m = enc.p.shape
    # vectorized over all pairs; matches stv_pair entrywise
    g_bot_f = 1.0 - r.r.sum(axis=0)           # (m,)
    g_w_bot = 1.0 - r.r.sum(axis=1)           # (n,)
    # firm_side[w, f] = sum_w' r[w', f] * max(q[w, f] - q[w', f], 0) + g_bot_f[f] * max(q[w, f], 0)
    dq = np.maximum(enc.q[:, None, :] - enc.q[None, :, :], 0.0)   # (w, w', f)
    firm_side = np.einsum("af,waf->wf", r.r, dq) + g_bot_f[None, :] * np.maximum(enc.q, 0.0)
    dp = np.maximum(enc.p[:, :, None] - enc.p[:, None, :], 0.0)   # (w, f, f')
    worker_side = np.einsum("wb,wfb->wf", r.r, dp) + g_w_bot[:, None] * np.maximum(enc.p, 0.0)
    return 0.5 * (1.0 / m + 1.0 / n) * float((firm_side * worker_side).sum())


def irv_profile(r: RandomizedMatching, enc: EncodedProfile) -> float:
    """Individual-rationality violation: probability mass on unacceptable
    partners, weighted by how deep below the unmatched option they sit."""
    _check_dims(r, enc)
    n, m = enc.p.shape
    return float((r.r * np.maximum(-enc.q, 0.0)).sum() / (2 * m)
                 + (r.r * np.maximum(-enc.p, 0.0)).sum() / (2 * n))


def cumulative_prob(r: RandomizedMatching, order, agent: AgentId,
                    threshold: int, strict: bool = False) -> float:
    """Mass the agent receives on partners ranked weakly above the
    threshold under `order`.  `strict=True` switches to the literal
    strict-inequality reading (excludes the threshold itself); the default
    weak inclusion is the top-k cumulative used everywhere in this package.
    """
    if not order.is_acceptable(threshold):
        raise ValueError(f"threshold {threshold} is unacceptable under the given order")
    marginal = r.r[agent.index, :] if agent.side is Side.WORKER else r.r[:, agent.index]
    total = 0.0
    for x in range(marginal.shape[0]):
        if order.prefers(x, threshold) or (x == threshold and not strict):
            total += marginal[x]
    return float(total)


def regret_agent(mech, profile: PreferenceProfile, agent: AgentId,
                 cap: int = 6) -> float:
    """Max FOSD cumulative gain for one agent over all enumerated
    misreports and all acceptable thresholds, floored at 0.  Thresholds and
    prefix sets come from the agent's true order."""
    order = profile.order_of(agent)
    thresholds = list(order.acceptable())
    if not thresholds:
        return 0.0
    size = profile.m if agent.side is Side.WORKER else profile.n
    r_truth = mech.evaluate(profile)
    truth_cum = {t: cumulative_prob(r_truth, order, agent, t) for t in thresholds}
    best = 0.0
    for misreport in enumerate_misreports(agent.side, size, cap=cap):
        r_mis = mech.evaluate(profile.with_order(agent, misreport))
        for t in thresholds:
            gain = cumulative_prob(r_mis, order, agent, t) - truth_cum[t]
            best = max(best, gain)
    return best


def regret_profile(mech, profile: PreferenceProfile, cap: int = 6) -> float:
    """Two-sided average regret: 1/2 (worker mean + firm mean)."""
    worker_mean = np.mean([regret_agent(mech, profile, AgentId(Side.WORKER, w), cap)
                           for w in range(profile.n)])
    firm_mean = np.mean([regret_agent(mech, profile, AgentId(Side.FIRM, f), cap)
                         for f in range(profile.m)])
    return float(0.5 * (worker_mean + firm_mean))


def welfare_profile(r: RandomizedMatching, enc: EncodedProfile) -> float:
    """Expected welfare per agent under the evenly-spaced utilities of the
    true profile; unmatched agents contribute zero."""
    _check_dims(r, enc)
    n, m = enc.p.shape
    return float((r.r * (enc.p + enc.q)).sum() / (n + m))


def similarity(r: RandomizedMatching, profile: PreferenceProfile) -> float:
    """Agreement with deferred acceptance: mass placed on a DA matching's
    pairs divided by that matching's size, best of the two proposing sides.
    Sides with empty DA matchings are skipped; 1 if both are empty."""
    scores = []
    for proposing in (Proposing.WORKERS, Proposing.FIRMS):
        matching = da(profile, proposing)
        if matching.pairs:
            mass = sum(r.r[w, f] for w, f in matching.pairs)
            scores.append(mass / len(matching.pairs))
    return float(max(scores)) if scores else 1.0


def entropy(r: RandomizedMatching) -> float:
    """Normalized entropy per agent, including the unmatched margins."""
    n, m = r.n, r.m
    if n <= 1 or m <= 1:
        warnings.warn("entropy undefined for single-agent sides; returning 0")
        return 0.0

    def plogp(x):
        x = np.clip(x, 0.0, 1.0)
        return np.where(x > 0.0, x * np.log2(np.maximum(x, 1e-300)), 0.0)

    worker_rows = np.concatenate([r.r, r.unmatched_workers()[:, None]], axis=1)
    firm_cols = np.concatenate([r.r, r.unmatched_firms()[None, :]], axis=0)
    h_workers = -plogp(worker_rows).sum() / np.log2(m)
    h_firms = -plogp(firm_cols).sum() / np.log2(n)
    return float(h_workers / (2 * n) + h_firms / (2 * m))


def _marginals_for(mech, profiles):
    """One RandomizedMatching per profile, batched when the mechanism
    supports it."""
    if hasattr(mech, "evaluate_many"):
        return mech.evaluate_many(profiles)
    out = []
    for idx, profile in enumerate(profiles):
        try:
            out.append(mech.evaluate(profile))
        except Exception as err:
            raise RuntimeError(f"evaluation failed at profile {idx}") from err
    return out


def evaluate(mech, profiles, cap: int = 6) -> EvalReport:
    """Arithmetic means of all per-profile metrics over a profile set.
    Regret uses full misreport enumeration."""
    if not profiles:
        raise ValueError("profile list is empty")
    stv_sum = rgt_sum = irv_sum = wel_sum = sim_sum = ent_sum = 0.0
    truths = _marginals_for(mech, profiles)
    batched = hasattr(mech, "evaluate_many")
    for idx, (profile, r) in enumerate(zip(profiles, truths)):
        try:
            enc = encode(profile)
            stv_sum += stv_profile(r, enc)
            irv_sum += irv_profile(r, enc)
            wel_sum += welfare_profile(r, enc)
            sim_sum += similarity(r, profile)
            ent_sum += entropy(r)
            rgt_sum += (_regret_profile_batched(mech, profile, r, cap) if batched
                        else regret_profile(mech, profile, cap))
        except Exception as err:
            raise RuntimeError(f"evaluation failed at profile {idx}") from err
    count = len(profiles)
    return EvalReport(stv=stv_sum / count, rgt=rgt_sum / count, irv=irv_sum / count,
                      welfare_per_agent=wel_sum / count, sim=sim_sum / count,
                      entropy=ent_sum / count, profiles_evaluated=count)


def _regret_profile_batched(mech, profile, r_truth, cap: int) -> float:
    """regret_profile that pushes all misreport variants of one profile
    through evaluate_many at once."""
    variants = []
    spans = []  # (agent, thresholds, start, stop)
    for agent in profile.agents():
        order = profile.order_of(agent)
        thresholds = list(order.acceptable())
        if not thresholds:
            spans.append((agent, thresholds, 0, 0))
            continue
        size = profile.m if agent.side is Side.WORKER else profile.n
        misreports = enumerate_misreports(agent.side, size, cap=cap)
        start = len(variants)
        variants.extend(profile.with_order(agent, mis) for mis in misreports)
        spans.append((agent, thresholds, start, len(variants)))
    results = mech.evaluate_many(variants) if variants else []

    worker_regrets, firm_regrets = [], []
    for agent, thresholds, start, stop in spans:
        order = profile.order_of(agent)
        best = 0.0
        truth_cum = {t: cumulative_prob(r_truth, order, agent, t) for t in thresholds}
        for r_mis in results[start:stop]:
            for t in thresholds:
                best = max(best, cumulative_prob(r_mis, order, agent, t) - truth_cum[t])
        (worker_regrets if agent.side is Side.WORKER else firm_regrets).append(best)
    return float(0.5 * (np.mean(worker_regrets) + np.mean(firm_regrets)))
