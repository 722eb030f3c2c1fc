import numpy as np
import pytest

from matchfrontier import metrics
from matchfrontier.net import (CheckpointError, NetworkDims, NetworkMechanism,
                               NumericOverflowError, build_mask, forward,
                               forward_batch, init_params, layer_shapes,
                               load_checkpoint, save_checkpoint)
from matchfrontier.prefs import (DistributionConfig, DistributionKind, encode,
                                 parse_profile, sample_profiles)


def random_profiles(count, n=4, m=4, seed=0):
    cfg = DistributionConfig(DistributionKind.UNCORRELATED, n, m,
                             p_trunc=0.3, seed=seed)
    return sample_profiles(cfg, count)


class TestDims:
    def test_widths(self):
        dims = NetworkDims(4, 4)
        assert dims.input_width == 32
        assert dims.output_width == 5 * 4 + 4 * 5

    def test_layer_shapes(self):
        shapes = layer_shapes(NetworkDims(3, 3, R=2, J=16))
        assert shapes[0] == ((16, 18), (16,))
        assert shapes[1] == ((16, 16), (16,))
        assert shapes[2] == ((24, 16), (24,))

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            NetworkDims(2, 2, R=0)


class TestInit:
    def test_deterministic(self):
        dims = NetworkDims(3, 3, R=2, J=8)
        a = init_params(dims, seed=5)
        b = init_params(dims, seed=5)
        for (wa, ba), (wb, bb) in zip(a, b):
            assert np.array_equal(wa, wb) and np.array_equal(ba, bb)

    def test_fan_in_bound(self):
        dims = NetworkDims(3, 3, R=2, J=8)
        for (w, b), (w_shape, _) in zip(init_params(dims, 0), layer_shapes(dims)):
            assert np.all(np.abs(w) <= np.sqrt(1.0 / w_shape[1]))
            assert np.all(b == 0)


class TestMask:
    def test_mutual_acceptability(self):
        profile = parse_profile("f1,_,f2|w1,_;_,w1")
        beta = build_mask(profile)
        assert beta[0, 0] == 1.0   # mutually acceptable
        assert beta[0, 1] == 0.0   # w1 rejects f2 and f2 rejects w1
        assert np.all(beta[1, :] == 1.0) and np.all(beta[:, 2] == 1.0)


class TestForward:
    def test_zero_params_all_acceptable_uniform(self):
        # softplus(0) constant scores, column norm over n+1, row norm over
        # m+1, min of two 1/5 tensors
        dims = NetworkDims(4, 4, R=4, J=16)
        params = init_params(dims, 0, zero=True)
        r = forward_batch(params, dims, np.zeros((1, 32)), np.ones((1, 5, 5)))
        assert np.allclose(r, 0.2, atol=1e-12)

    def test_zero_params_1x1(self):
        dims = NetworkDims(1, 1, R=2, J=4)
        r = forward_batch(init_params(dims, 0, zero=True), dims,
                          np.zeros((1, 2)), np.ones((1, 2, 2)))
        assert np.allclose(r, 0.5, atol=1e-12)

    def test_masked_pairs_exactly_zero(self):
        dims = NetworkDims(3, 3, R=2, J=8)
        params = init_params(dims, seed=1)
        for profile in random_profiles(20, n=3, m=3, seed=7):
            enc = encode(profile)
            beta = build_mask(profile)
            r = forward(params, dims, enc, beta).r
            assert np.all(r[beta[:3, :3] == 0.0] == 0.0)

    def test_weakly_doubly_stochastic(self):
        dims = NetworkDims(4, 4, R=2, J=8)
        params = init_params(dims, seed=3)
        mech = NetworkMechanism(params, dims)
        for r in mech.evaluate_many(random_profiles(50, seed=9)):
            r.validate(eps=1e-9)

    def test_network_outputs_are_ir(self):
        # masked pairs carry no mass, so irv is exactly zero
        dims = NetworkDims(4, 4, R=2, J=8)
        mech = NetworkMechanism(init_params(dims, seed=4), dims)
        for profile in random_profiles(30, seed=10):
            assert metrics.irv_profile(mech.evaluate(profile), encode(profile)) == 0.0

    def test_batched_equals_single(self):
        dims = NetworkDims(3, 3, R=2, J=8)
        mech = NetworkMechanism(init_params(dims, seed=6), dims)
        profiles = random_profiles(8, n=3, m=3, seed=11)
        batched = mech.evaluate_many(profiles)
        for profile, rb in zip(profiles, batched):
            # BLAS may reorder sums across batch shapes; compare to 1e-12
            assert np.allclose(mech.evaluate(profile).r, rb.r, atol=1e-12)

    def test_overflow_detected(self):
        dims = NetworkDims(2, 2, R=2, J=4)
        params = init_params(dims, 0, zero=True)
        params[0] = (np.full_like(params[0][0], 1e300), params[0][1])
        with pytest.raises(NumericOverflowError) as info:
            forward_batch(params, dims, np.full((1, 8), 1e300), np.ones((1, 3, 3)))
        assert info.value.layer == 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        dims = NetworkDims(3, 4, R=3, J=8)
        params = init_params(dims, seed=13)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params, dims, lam=0.37, seed=99)
        loaded, ldims, lam, seed = load_checkpoint(path)
        assert ldims == dims and lam == pytest.approx(0.37) and seed == 99
        for (w, b), (lw, lb) in zip(params, loaded):
            # storage is f32, so round-trip is exact only to float precision
            assert np.allclose(w, lw, atol=1e-7)
            assert np.allclose(b, lb, atol=1e-7)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        dims = NetworkDims(2, 2, R=1, J=4)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, init_params(dims, 0), dims, 0.0, 0)
        with open(path, "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_loaded_network_runs(self, tmp_path):
        dims = NetworkDims(3, 3, R=2, J=8)
        params = init_params(dims, seed=21)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params, dims, 0.5, 21)
        loaded, ldims, _, _ = load_checkpoint(path)
        profile = random_profiles(1, n=3, m=3, seed=22)[0]
        a = NetworkMechanism(params, dims).evaluate(profile).r
        b = NetworkMechanism(loaded, ldims).evaluate(profile).r
        assert np.allclose(a, b, atol=1e-5)
