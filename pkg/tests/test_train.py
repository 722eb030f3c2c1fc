import csv
from dataclasses import replace

import numpy as np
import pytest

from matchfrontier import metrics
from matchfrontier.autodiff import backward
from matchfrontier.net import (NetworkDims, NetworkMechanism, init_params,
                               load_checkpoint)
from matchfrontier.prefs import (AgentId, DistributionConfig,
                                 DistributionKind, Side, parse_profile,
                                 sample_profiles)
from matchfrontier.train import (HELDOUT_LANE, TrainConfig, desk_config,
                                 find_defeating_report, loss_minibatch, train)


def small_dist(n=2, m=2, seed=7, p_trunc=0.3):
    return DistributionConfig(DistributionKind.UNCORRELATED, n, m,
                              p_trunc=p_trunc, seed=seed)


def small_config(lam=0.4, seed=7, **overrides):
    dims = NetworkDims(2, 2, R=2, J=6)
    base = TrainConfig(lam=lam, dims=dims, dist=small_dist(seed=seed),
                       batch_size=4, iterations=6, base_lr=0.002,
                       lr_milestones=(4,), eval_every=3, test_size=8,
                       checkpoint_path="", log_path="")
    return replace(base, **overrides)


class TestLossGradient:
    def test_matches_finite_differences(self):
        dims = NetworkDims(2, 2, R=2, J=6)
        dist = small_dist()
        params = init_params(dims, seed=3)
        profiles = sample_profiles(dist, 3, lane=1)
        build = loss_minibatch(params, dims, profiles, lam=0.4)
        backward(build.tape, build.loss)
        grads = [tuple(p.grad for p in group) for group in build.param_nodes]

        rng = np.random.default_rng(0)
        for _ in range(15):
            li = int(rng.integers(len(params)))
            pj = int(rng.integers(2))
            idx = tuple(int(rng.integers(s)) for s in params[li][pj].shape)
            h = 1e-6

            def loss_at(delta):
                bumped = [list(group) for group in params]
                bumped[li][pj] = params[li][pj].copy()
                bumped[li][pj][idx] += delta
                bumped = [tuple(group) for group in bumped]
                return float(loss_minibatch(bumped, dims, profiles, 0.4).loss.value)

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            assert grads[li][pj][idx] == pytest.approx(fd, abs=1e-7)

    def test_loss_is_convex_combination(self):
        dims = NetworkDims(2, 2, R=2, J=6)
        params = init_params(dims, seed=3)
        profiles = sample_profiles(small_dist(), 3, lane=1)
        for lam in (0.0, 0.3, 1.0):
            build = loss_minibatch(params, dims, profiles, lam=lam)
            expected = lam * build.stv + (1 - lam) * build.rgt
            assert float(build.loss.value) == pytest.approx(expected, abs=1e-12)

    def test_empty_batch_rejected(self):
        dims = NetworkDims(2, 2, R=2, J=6)
        with pytest.raises(ValueError):
            loss_minibatch(init_params(dims, 0), dims, [], 0.5)


class TestDefeatingSearch:
    def test_gain_equals_enumerated_regret(self):
        # the searched max gain must equal the independent per-agent regret
        dims = NetworkDims(3, 3, R=2, J=8)
        for seed in (1, 2, 3):
            params = init_params(dims, seed=seed)
            mech = NetworkMechanism(params, dims)
            for profile in sample_profiles(small_dist(3, 3, seed=seed), 3):
                for agent in profile.agents():
                    report = find_defeating_report(params, dims, profile, agent)
                    expected = metrics.regret_agent(mech, profile, agent)
                    assert report.gain == pytest.approx(expected, abs=1e-9)

    def test_truth_returned_when_no_gain(self):
        # an agent with an empty acceptable list can never gain
        profile = parse_profile("_,f1,f2;f1,f2,_|w1,w2,_;w2,w1,_")
        dims = NetworkDims(2, 2, R=2, J=6)
        params = init_params(dims, seed=5)
        agent = AgentId(Side.WORKER, 0)
        report = find_defeating_report(params, dims, profile, agent)
        assert report.gain == 0.0
        assert report.report == profile.workers[0]


class TestTrainLoop:
    def test_deterministic(self):
        a = train(small_config())
        b = train(small_config())
        for (wa, ba), (wb, bb) in zip(a.params, b.params):
            assert np.array_equal(wa, wb) and np.array_equal(ba, bb)
        assert a.heldout_stv == b.heldout_stv
        assert a.heldout_rgt == b.heldout_rgt

    def test_seed_changes_results(self):
        a = train(small_config(seed=7))
        b = train(small_config(seed=8))
        assert not np.array_equal(a.params[0][0], b.params[0][0])

    def test_heldout_matches_metrics_evaluate(self):
        result = train(small_config())
        config = small_config()
        mech = NetworkMechanism(result.params, config.dims)
        heldout = sample_profiles(config.dist, config.test_size, lane=HELDOUT_LANE)
        report = metrics.evaluate(mech, heldout)
        assert result.heldout_stv == pytest.approx(report.stv, abs=1e-9)
        assert result.heldout_rgt == pytest.approx(report.rgt, abs=1e-9)

    def test_checkpoint_and_log_written(self, tmp_path):
        ckpt = tmp_path / "run.ckpt"
        log = tmp_path / "run.log"
        config = small_config(checkpoint_path=str(ckpt), log_path=str(log))
        result = train(config)
        params, dims, lam, seed = load_checkpoint(ckpt)
        assert dims == config.dims and lam == pytest.approx(config.lam)
        # stored weights are f32 roundings of the final parameters
        assert np.allclose(params[0][0], result.params[0][0], atol=1e-6)
        with open(log) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "loss", "stv", "rgt", "lr"]
        assert [int(r[0]) for r in rows[1:]] == [3, 6]

    def test_lr_schedule_applied(self, tmp_path):
        log = tmp_path / "run.log"
        config = small_config(log_path=str(log), lr_milestones=(4,))
        train(config)
        with open(log) as fh:
            rows = list(csv.reader(fh))[1:]
        assert float(rows[0][4]) == pytest.approx(0.002)   # iters 0-2
        assert float(rows[1][4]) == pytest.approx(0.001)   # after milestone 4

    def test_lambda_bounds_validated(self):
        with pytest.raises(ValueError):
            small_config(lam=1.5)

    def test_loss_decreases_on_short_run(self):
        # 60 iterations at desk-like lr should improve the running loss
        config = small_config(iterations=60, eval_every=60, base_lr=0.005,
                              batch_size=8, lr_milestones=())
        result = train(config)
        first = loss_minibatch(init_params(config.dims, seed=config.dist.seed),
                               config.dims,
                               sample_profiles(config.dist, 32, lane=HELDOUT_LANE),
                               config.lam)
        last = loss_minibatch(result.params, config.dims,
                              sample_profiles(config.dist, 32, lane=HELDOUT_LANE),
                              config.lam)
        assert float(last.loss.value) < float(first.loss.value)


class TestDeskConfig:
    def test_preset_shape(self):
        config = desk_config(0.5, seed=2)
        assert config.dims == NetworkDims(3, 3, R=4, J=64)
        assert config.batch_size == 128
        assert config.iterations == 2000
        assert config.test_size == 2048
        assert config.dist.seed == 2
