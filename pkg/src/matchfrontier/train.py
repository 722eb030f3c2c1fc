"""Training: minibatch assembly, defeating-misreport search, the tradeoff
loss, the SGD loop, and checkpointing.

The loss is lambda * stability violation + (1 - lambda) * a regret
surrogate.  Per agent, the surrogate fixes both the defeating misreport
and the threshold at which it wins (recomputed from scratch every
iteration at current parameters); only the marginal probabilities flow
gradients.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff, net
from .autodiff import NumericError, OptimizerState, Tape, adam_step, backward, lr_schedule
from .net import NetworkDims, NumericOverflowError, build_mask, init_params
from .prefs import (AgentId, DistributionConfig, PreferenceOrder,
                    PreferenceProfile, Side, encode, encode_order,
                    enumerate_misreports, profile_stream, sample_profile,
                    sample_profiles)

TRAIN_LANE = 1
HELDOUT_LANE = 2

_FORWARD_CHUNK = 16384


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    dims: NetworkDims
    dist: DistributionConfig
    batch_size: int = 1024
    iterations: int = 50_000
    base_lr: float = 0.005
    lr_milestones: tuple = (10_000, 25_000)
    weight_decay: float = 0.01
    eval_every: int = 2_000
    test_size: int = 2_048
    misreport_cap: int = 6
    checkpoint_path: str = "matching.ckpt"
    log_path: str = ""

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")


@dataclass(frozen=True)
class DefeatingReport:
    agent: AgentId
    report: PreferenceOrder
    gain: float


# ---------------------------------------------------------------------------
# Precomputed misreport tables and batch layout

@dataclass(frozen=True)
class _MisreportTable:
    orders: tuple        # K PreferenceOrder
    rows: np.ndarray     # (K, size) encoded utility rows
    acc: np.ndarray      # (K, size) acceptability as 0/1


def _misreport_table(side: Side, size: int, cap: int) -> _MisreportTable:
    orders = enumerate_misreports(side, size, cap=cap)
    rows = np.stack([encode_order(o, size) for o in orders])
    acc = (rows > 0.0).astype(np.float64)
    return _MisreportTable(tuple(orders), rows, acc)


class _Batch:
    """Dense arrays for one batch of profiles plus threshold indicators.

    Agent axis: workers 0..n-1 then firms n..n+m-1.  Threshold axis is the
    agent's acceptable partners, best first, padded with invalid slots.
    """

    def __init__(self, profiles, dims: NetworkDims):
        n, m = dims.n, dims.m
        B = len(profiles)
        A = n + m
        TH = max(n, m)
        self.profiles = profiles
        self.P = np.empty((B, n, m))
        self.Q = np.empty((B, n, m))
        self.beta = np.empty((B, n + 1, m + 1))
        self.ind = np.zeros((B, A, TH, n, m))      # prefix-set indicators
        self.thr_valid = np.zeros((B, A, TH), dtype=bool)
        for b, profile in enumerate(profiles):
            enc = encode(profile)
            self.P[b] = enc.p
            self.Q[b] = enc.q
            self.beta[b] = build_mask(profile)
            for w, order in enumerate(profile.workers):
                for t, threshold in enumerate(order.acceptable()):
                    for f in range(m):
                        if f == threshold or order.prefers(f, threshold):
                            self.ind[b, w, t, w, f] = 1.0
                    self.thr_valid[b, w, t] = True
            for f, order in enumerate(profile.firms):
                for t, threshold in enumerate(order.acceptable()):
                    for w in range(n):
                        if w == threshold or order.prefers(w, threshold):
                            self.ind[b, n + f, t, w, f] = 1.0
                    self.thr_valid[b, n + f, t] = True
        self.acc_w = (self.P > 0.0).astype(np.float64)
        self.acc_f = (self.Q > 0.0).astype(np.float64)
        self.X = np.concatenate([self.P.reshape(B, -1), self.Q.reshape(B, -1)], axis=1)


def _forward_chunked(params, dims, X, beta):
    outs = []
    for start in range(0, X.shape[0], _FORWARD_CHUNK):
        outs.append(net.forward_batch(params, dims, X[start:start + _FORWARD_CHUNK],
                                      beta[start:start + _FORWARD_CHUNK]))
    return np.concatenate(outs, axis=0)


def _variant_inputs(batch: _Batch, dims: NetworkDims, tables):
    """Inputs for every (profile, agent, misreport) combination, grouped
    profile-major, worker agents before firm agents."""
    n, m = dims.n, dims.m
    B = len(batch.profiles)
    table_w, table_f = tables
    Kw, Kf = len(table_w.orders), len(table_f.orders)
    per_profile = n * Kw + m * Kf
    nm = n * m

    Xv = np.repeat(batch.X, per_profile, axis=0).reshape(B, per_profile, 2 * nm)
    Bv = np.repeat(batch.beta, per_profile, axis=0).reshape(B, per_profile, n + 1, m + 1)
    for w in range(n):
        rows = slice(w * Kw, (w + 1) * Kw)
        Xv[:, rows, w * m:(w + 1) * m] = table_w.rows[None, :, :]
        Bv[:, rows, w, :m] = table_w.acc[None, :, :] * batch.acc_f[:, None, w, :]
    q_idx = nm + np.arange(n) * m
    for f in range(m):
        rows = slice(n * Kw + f * Kf, n * Kw + (f + 1) * Kf)
        Xv[:, rows, :][:, :, q_idx + f] = table_f.rows[None, :, :]
        Bv[:, rows, :n, f] = table_f.acc[None, :, :] * batch.acc_w[:, None, :, f]
    return Xv.reshape(-1, 2 * nm), Bv.reshape(-1, n + 1, m + 1), per_profile


def _search_defeating(params, dims: NetworkDims, batch: _Batch, tables):
    """Per (profile, agent): best misreport index (-1 when truth wins), the
    winning threshold slot, and the gain (0 when truth wins)."""
    n, m = dims.n, dims.m
    B = len(batch.profiles)
    A = n + m
    table_w, table_f = tables
    Kw, Kf = len(table_w.orders), len(table_f.orders)

    r_truth = _forward_chunked(params, dims, batch.X, batch.beta)
    cum_truth = np.einsum("bqtwf,bwf->bqt", batch.ind, r_truth)  # (B, A, TH)

    Xv, Bv, per_profile = _variant_inputs(batch, dims, tables)
    r_var = _forward_chunked(params, dims, Xv, Bv).reshape(B, per_profile, n, m)

    rw = r_var[:, :n * Kw].reshape(B, n, Kw, n, m)
    cum_w = np.einsum("bakwf,batwf->bakt", rw, batch.ind[:, :n])   # (B, n, Kw, TH)
    rf = r_var[:, n * Kw:].reshape(B, m, Kf, n, m)
    cum_f = np.einsum("bakwf,batwf->bakt", rf, batch.ind[:, n:])   # (B, m, Kf, TH)
    # max over valid thresholds of (cum_mis - cum_truth); ties resolved by
    # argmax order: misreport enumeration order first, threshold order second
    diff_w = cum_w - cum_truth[:, :n, None, :]
    diff_w = np.where(batch.thr_valid[:, :n, None, :], diff_w, -np.inf)
    diff_f = cum_f - cum_truth[:, n:, None, :]
    diff_f = np.where(batch.thr_valid[:, n:, None, :], diff_f, -np.inf)

    TH = batch.ind.shape[2]
    best_k = np.full((B, A), -1, dtype=np.int64)
    best_th = np.zeros((B, A), dtype=np.int64)
    best_gain = np.zeros((B, A))
    for side_diff, offset, count in ((diff_w, 0, n), (diff_f, n, m)):
        if count == 0:
            continue
        flat = side_diff.reshape(B, count, -1)
        arg = np.argmax(flat, axis=2)
        top = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        positive = top > 0.0
        best_gain[:, offset:offset + count] = np.where(positive, top, 0.0)
        best_k[:, offset:offset + count] = np.where(positive, arg // TH, -1)
        best_th[:, offset:offset + count] = np.where(positive, arg % TH, 0)
    return best_k, best_th, best_gain


def find_defeating_report(params, dims: NetworkDims, profile: PreferenceProfile,
                          agent: AgentId, cap: int = 6) -> DefeatingReport:
    """Max-gain defeating misreport for one agent, or truth with gain 0."""
    tables = (_misreport_table(Side.WORKER, dims.m, cap),
              _misreport_table(Side.FIRM, dims.n, cap))
    batch = _Batch([profile], dims)
    best_k, _, best_gain = _search_defeating(params, dims, batch, tables)
    a = agent.index if agent.side is Side.WORKER else dims.n + agent.index
    k = int(best_k[0, a])
    if k < 0:
        return DefeatingReport(agent, profile.order_of(agent), 0.0)
    table = tables[0] if agent.side is Side.WORKER else tables[1]
    return DefeatingReport(agent, table.orders[k], float(best_gain[0, a]))


# ---------------------------------------------------------------------------
# Tape forward and loss

def _forward_tape(tape: Tape, param_nodes, dims: NetworkDims, x: np.ndarray,
                  beta: np.ndarray):
    """Tape twin of net.forward_batch: identical operation order, so the
    forward values match the plain evaluation bitwise."""
    n, m = dims.n, dims.m
    h = tape.constant(x)
    for weight, bias in param_nodes[:-1]:
        h = (h @ weight.transpose() + bias).leaky_relu(net.LEAKY_SLOPE)
    weight, bias = param_nodes[-1]
    out = h @ weight.transpose() + bias
    split = (n + 1) * m
    s = out[:, :split].reshape(-1, n + 1, m)
    s2 = out[:, split:].reshape(-1, n, m + 1)
    sbar = tape.constant(beta[:, :, :m]) * s.softplus()
    sbar2 = tape.constant(beta[:, :n, :]) * s2.softplus()
    shat = sbar / sbar.sum(axis=1, keepdims=True)
    shat2 = sbar2 / sbar2.sum(axis=2, keepdims=True)
    return shat[:, :n, :].minimum(shat2[:, :, :m])


@dataclass
class LossBuild:
    tape: Tape
    loss: "autodiff.Node"
    param_nodes: list
    stv: float
    rgt: float
    selection: tuple  # (best_k, best_th) the surrogate was built against


def _loss_from_batch(params, dims: NetworkDims, batch: _Batch, lam: float,
                     tables, selection=None) -> LossBuild:
    n, m = dims.n, dims.m
    B = len(batch.profiles)
    A = n + m
    table_w, table_f = tables

    if selection is None:
        best_k, best_th, _ = _search_defeating(params, dims, batch, tables)
    else:
        best_k, best_th = selection

    # defeat inputs: truth with the chosen misreport substituted per agent
    X_def = np.repeat(batch.X, A, axis=0).reshape(B, A, -1)
    beta_def = np.repeat(batch.beta, A, axis=0).reshape(B, A, n + 1, m + 1)
    ind_sel = np.zeros((B, A, n, m))
    for b in range(B):
        for a in range(A):
            k = best_k[b, a]
            if k < 0:
                continue
            ind_sel[b, a] = batch.ind[b, a, best_th[b, a]]
            if a < n:
                w = a
                X_def[b, a, w * m:(w + 1) * m] = table_w.rows[k]
                beta_def[b, a, w, :m] = table_w.acc[k] * batch.acc_f[b, w, :]
            else:
                f = a - n
                X_def[b, a, n * m + np.arange(n) * m + f] = table_f.rows[k]
                beta_def[b, a, :n, f] = table_f.acc[k] * batch.acc_w[b, :, f]

    tape = Tape()
    param_nodes = [(tape.leaf(w), tape.leaf(bias)) for w, bias in params]
    r_t = _forward_tape(tape, param_nodes, dims, batch.X, batch.beta)
    r_d = _forward_tape(tape, param_nodes, dims,
                        X_def.reshape(B * A, -1), beta_def.reshape(B * A, n + 1, m + 1))

    # stability violation (vectorized Eqs. for all pairs)
    dq = np.maximum(batch.Q[:, :, None, :] - batch.Q[:, None, :, :], 0.0)  # (B, w, w', f)
    dp = np.maximum(batch.P[:, :, :, None] - batch.P[:, :, None, :], 0.0)  # (B, w, f, f')
    g_bot_f = 1.0 - r_t.sum(axis=1)            # (B, m) node
    g_w_bot = 1.0 - r_t.sum(axis=2)            # (B, n) node
    firm_side = (r_t.reshape(B, 1, n, m) * tape.constant(dq)).sum(axis=2) \
        + g_bot_f.reshape(B, 1, m) * tape.constant(np.maximum(batch.Q, 0.0))
    worker_side = (r_t.reshape(B, n, 1, m) * tape.constant(dp)).sum(axis=3) \
        + g_w_bot.reshape(B, n, 1) * tape.constant(np.maximum(batch.P, 0.0))
    stv_node = ((firm_side * worker_side).sum(axis=(1, 2))
                * (0.5 * (1.0 / m + 1.0 / n))).mean()

    # regret surrogate at the fixed defeating report and threshold
    cum_d = (r_d.reshape(B, A, n, m) * tape.constant(ind_sel)).sum(axis=(2, 3))
    cum_t = (r_t.reshape(B, 1, n, m) * tape.constant(ind_sel)).sum(axis=(2, 3))
    weights = np.concatenate([np.full(n, 1.0 / (2 * n)), np.full(m, 1.0 / (2 * m))])
    rgt_node = ((cum_d - cum_t).relu() * tape.constant(weights)).sum(axis=1).mean()

    loss = stv_node * lam + rgt_node * (1.0 - lam)
    return LossBuild(tape=tape, loss=loss, param_nodes=param_nodes,
                     stv=float(stv_node.value), rgt=float(rgt_node.value),
                     selection=(best_k, best_th))


def loss_minibatch(params, dims: NetworkDims, profiles, lam: float,
                   cap: int = 6, selection=None) -> LossBuild:
    """Differentiable minibatch loss.  Defeating reports are resolved at the
    current parameters before the tape is built, or pinned by passing a
    previous build's `selection` (useful for finite-difference checks, where
    the argmax must not move between evaluations)."""
    if not profiles:
        raise ValueError("minibatch is empty")
    tables = (_misreport_table(Side.WORKER, dims.m, cap),
              _misreport_table(Side.FIRM, dims.n, cap))
    return _loss_from_batch(params, dims, _Batch(profiles, dims), lam, tables,
                            selection=selection)


# ---------------------------------------------------------------------------
# Held-out evaluation (exact: the search gain *is* the enumerated regret)

def _heldout_stv_rgt(params, dims: NetworkDims, batch: _Batch, tables):
    from .metrics import stv_profile  # local import to avoid cycle at module load
    from .mechanisms import RandomizedMatching
    from .prefs import EncodedProfile

    n, m = dims.n, dims.m
    _, _, best_gain = _search_defeating(params, dims, batch, tables)
    weights = np.concatenate([np.full(n, 1.0 / (2 * n)), np.full(m, 1.0 / (2 * m))])
    rgt = float((best_gain * weights).sum(axis=1).mean())
    r_truth = _forward_chunked(params, dims, batch.X, batch.beta)
    stv = float(np.mean([
        stv_profile(RandomizedMatching(r_truth[b]),
                    EncodedProfile(p=batch.P[b], q=batch.Q[b]))
        for b in range(len(batch.profiles))]))
    return stv, rgt


@dataclass
class TrainResult:
    params: list
    log: list           # rows of (iteration, loss, heldout stv, heldout rgt, lr)
    heldout_stv: float
    heldout_rgt: float


def train(config: TrainConfig, progress=None) -> TrainResult:
    """Run the SGD loop: fresh minibatch every iteration, defeating-report
    search at current parameters, Adam step with the halving schedule.
    Checkpoints at every eval point and at the end; a numeric failure
    aborts with the last good checkpoint on disk."""
    dims, dist = config.dims, config.dist
    tables = (_misreport_table(Side.WORKER, dims.m, config.misreport_cap),
              _misreport_table(Side.FIRM, dims.n, config.misreport_cap))
    params = init_params(dims, seed=dist.seed)
    state = OptimizerState.for_params(params, lr=config.base_lr,
                                      weight_decay=config.weight_decay)
    heldout = _Batch(sample_profiles(dist, config.test_size, lane=HELDOUT_LANE), dims) \
        if config.test_size > 0 else None

    log = []
    loss_window = []

    def checkpoint():
        if config.checkpoint_path:
            net.save_checkpoint(config.checkpoint_path, params, dims,
                                config.lam, dist.seed)

    def write_log():
        if config.log_path:
            with open(config.log_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iter", "loss", "stv", "rgt", "lr"])
                writer.writerows(log)

    stv = rgt = math.nan
    for it in range(config.iterations):
        state.lr = lr_schedule(config.base_lr, it, config.lr_milestones)
        profiles = [sample_profile(dist, profile_stream(dist.seed, it * config.batch_size + j,
                                                        lane=TRAIN_LANE))
                    for j in range(config.batch_size)]
        try:
            build = _loss_from_batch(params, dims, _Batch(profiles, dims),
                                     config.lam, tables)
            backward(build.tape, build.loss)
            grads = [(w.grad, b.grad) for w, b in build.param_nodes]
            params, state = adam_step(state, params, grads)
        except (NumericError, NumericOverflowError):
            write_log()
            raise
        loss_window.append(float(build.loss.value))

        if config.eval_every and (it + 1) % config.eval_every == 0:
            if heldout is not None:
                stv, rgt = _heldout_stv_rgt(params, dims, heldout, tables)
            mean_loss = float(np.mean(loss_window[-config.eval_every:]))
            log.append((it + 1, mean_loss, stv, rgt, state.lr))
            write_log()
            checkpoint()
            if progress:
                progress(it + 1, mean_loss, stv, rgt)

    if heldout is not None:
        stv, rgt = _heldout_stv_rgt(params, dims, heldout, tables)
    if config.iterations and (not log or log[-1][0] != config.iterations):
        mean_loss = float(np.mean(loss_window[-max(1, config.eval_every or 1):])) \
            if loss_window else math.nan
        log.append((config.iterations, mean_loss, stv, rgt, state.lr))
    write_log()
    checkpoint()
    return TrainResult(params=params, log=log, heldout_stv=stv, heldout_rgt=rgt)


def desk_config(lam: float, seed: int = 1, n: int = 3, m: int = 3,
                checkpoint_path: str = "matching.ckpt", log_path: str = "",
                dist_kwargs=None) -> TrainConfig:
    """Desk-scale preset: small market, 2000 iterations, batch 128."""
    from .prefs import DistributionKind
    kwargs = dict(kind=DistributionKind.UNCORRELATED, n=n, m=m,
                  p_trunc=0.2, seed=seed)
    if dist_kwargs:
        kwargs.update(dist_kwargs)
    dist = DistributionConfig(**kwargs)
    return TrainConfig(lam=lam, dims=NetworkDims(n=n, m=m, R=4, J=64), dist=dist,
                       batch_size=128, iterations=2_000, base_lr=0.005,
                       lr_milestones=(10_000, 25_000), eval_every=500,
                       test_size=2_048, checkpoint_path=checkpoint_path,
                       log_path=log_path)
