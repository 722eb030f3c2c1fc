"""The matching network: encoded profile in, weakly doubly stochastic and
individually rational marginal matrix out.

The forward pass is a pure function of explicit parameters.  Scores are
softplus-squashed, masked by the acceptability matrix, normalized
column-wise on the (n+1) x m tensor and row-wise on the n x (m+1) tensor,
and combined with an elementwise min.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .prefs import EncodedProfile, PreferenceProfile, encode
from .mechanisms import RandomizedMatching

LEAKY_SLOPE = 0.01


class NumericOverflowError(ArithmeticError):
    """Non-finite activation during a forward pass."""

    def __init__(self, layer: int):
        super().__init__(f"non-finite activation at layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class NetworkDims:
    n: int
    m: int
    R: int = 4    # hidden layers
    J: int = 256  # units per hidden layer

    def __post_init__(self):
        if self.R < 1 or self.J < 1:
            raise ValueError("need at least one hidden layer and one unit")

    @property
    def input_width(self) -> int:
        return 2 * self.n * self.m

    @property
    def output_width(self) -> int:
        return (self.n + 1) * self.m + self.n * (self.m + 1)


def layer_shapes(dims: NetworkDims) -> list:
    """(weight shape, bias shape) per layer, hidden layers then output."""
    shapes = [((dims.J, dims.input_width), (dims.J,))]
    shapes += [((dims.J, dims.J), (dims.J,))] * (dims.R - 1)
    shapes.append(((dims.output_width, dims.J), (dims.output_width,)))
    return shapes


def init_params(dims: NetworkDims, seed: int, zero: bool = False) -> list:
    """Fan-in-scaled uniform weights, zero biases.  `zero` gives all-zero
    parameters (useful for the analytic forward cases)."""
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0x6E6574]))
    params = []
    for (w_shape, b_shape) in layer_shapes(dims):
        if zero:
            weight = np.zeros(w_shape)
        else:
            bound = np.sqrt(1.0 / w_shape[1])
            weight = rng.uniform(-bound, bound, size=w_shape)
        params.append((weight, np.zeros(b_shape)))
    return params


def build_mask(profile: PreferenceProfile) -> np.ndarray:
    """(n+1) x (m+1) 0/1 mask: zero exactly where the pair is unacceptable
    to either side; the unmatched row and column always pass."""
    n, m = profile.n, profile.m
    beta = np.ones((n + 1, m + 1))
    for w in range(n):
        for f in range(m):
            if not (profile.workers[w].is_acceptable(f)
                    and profile.firms[f].is_acceptable(w)):
                beta[w, f] = 0.0
    return beta


def softplus(x: np.ndarray) -> np.ndarray:
    # overflow-safe: ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    return np.logaddexp(0.0, x)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, LEAKY_SLOPE * x)


def forward_batch(params, dims: NetworkDims, x: np.ndarray, beta: np.ndarray
                  ) -> np.ndarray:
    """Batched forward pass: x is (B, 2nm), beta is (B, n+1, m+1); returns
    marginal matrices (B, n, m)."""
    n, m = dims.n, dims.m
    h = x
    for layer, (weight, bias) in enumerate(params[:-1]):
        h = leaky_relu(h @ weight.T + bias)
        if not np.all(np.isfinite(h)):
            raise NumericOverflowError(layer)
    weight, bias = params[-1]
    out = h @ weight.T + bias
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(len(params) - 1)

    split = (n + 1) * m
    s = out[:, :split].reshape(-1, n + 1, m)
    s2 = out[:, split:].reshape(-1, n, m + 1)
    sbar = beta[:, :, :m] * softplus(s)
    sbar2 = beta[:, :n, :] * softplus(s2)
    shat = sbar / sbar.sum(axis=1, keepdims=True)
    shat2 = sbar2 / sbar2.sum(axis=2, keepdims=True)
    return np.minimum(shat[:, :n, :], shat2[:, :, :m])


def forward(params, dims: NetworkDims, enc: EncodedProfile, beta: np.ndarray
            ) -> RandomizedMatching:
    x = np.concatenate([enc.p.reshape(-1), enc.q.reshape(-1)])[None, :]
    r = forward_batch(params, dims, x, beta[None, :, :])
    return RandomizedMatching(r[0])


class NetworkMechanism:
    """Mechanism-interface wrapper around fixed network parameters."""

    def __init__(self, params, dims: NetworkDims, label: str = "learned"):
        self.params = params
        self.dims = dims
        self.label = label

    def evaluate(self, profile: PreferenceProfile) -> RandomizedMatching:
        return forward(self.params, self.dims, encode(profile), build_mask(profile))

    def evaluate_many(self, profiles) -> list:
        if not profiles:
            return []
        xs = np.stack([np.concatenate([e.p.reshape(-1), e.q.reshape(-1)])
                       for e in (encode(p) for p in profiles)])
        betas = np.stack([build_mask(p) for p in profiles])
        rs = forward_batch(self.params, self.dims, xs, betas)
        return [RandomizedMatching(rs[i]) for i in range(len(profiles))]

    def __call__(self, profile):
        return self.evaluate(profile)


# ---------------------------------------------------------------------------
# Checkpoint format (little-endian): magic 'MTCH', u32 version=1,
# u32 n, m, R, J, u32 round(lambda * 1e6), u64 seed, then per layer the
# weights row-major as f32 followed by the biases as f32.

CHECKPOINT_MAGIC = b"MTCH"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, dims: NetworkDims, lam: float, seed: int) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIIIIQ", CHECKPOINT_VERSION, dims.n, dims.m,
                             dims.R, dims.J, round(lam * 1e6), seed))
        for weight, bias in params:
            fh.write(weight.astype("<f4").tobytes())
            fh.write(bias.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, dims, lambda, seed); parameters come back as f64
    copies of the stored f32 values."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("not a matching-network checkpoint")
        header = fh.read(struct.calcsize("<IIIIIIQ"))
        version, n, m, R, J, lam_scaled, seed = struct.unpack("<IIIIIIQ", header)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dims = NetworkDims(n=n, m=m, R=R, J=J)
        params = []
        for (w_shape, b_shape) in layer_shapes(dims):
            w_count = w_shape[0] * w_shape[1]
            weight = np.frombuffer(fh.read(4 * w_count), dtype="<f4").reshape(w_shape)
            bias = np.frombuffer(fh.read(4 * b_shape[0]), dtype="<f4")
            params.append((weight.astype(np.float64), bias.astype(np.float64)))
        if fh.read(1):
            raise CheckpointError("trailing bytes in checkpoint")
    return params, dims, lam_scaled / 1e6, seed
