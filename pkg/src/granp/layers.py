"""Differentiable building blocks: MLP, LSTM encoder, Conv-MLP pair encoder,
graph attention layer, and multi-head cross-attention.

Weight matrices initialize uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)];
biases start at zero except the LSTM forget gate (1.0, training stability).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DataError, ShapeError

MASK_NEG = 1e9  # additive penalty that underflows exp() for masked pairs


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to mask > 0; masked entries come out exactly 0.

    Masked scores are pushed to -MASK_NEG before the softmax, so their
    exponentials underflow to zero while gradients stay exact for the rest.
    Every row must have at least one unmasked entry.
    """
    m = ad.constant((mask > 0).astype(ad.dtype()))
    shifted = scores * m + (m - 1.0) * MASK_NEG
    return ad.softmax_rows(shifted)


class MlpBlock:
    """Stack of affine layers with ReLU between stages and identity output."""

    def __init__(self, name: str, widths, rng: np.random.Generator):
        if len(widths) < 2:
            raise ShapeError(f"{name}: MlpBlock needs at least [in, out] widths, got {widths}")
        self.widths = list(widths)
        self.weights = []
        self.biases = []
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(Parameter(f"{name}.{i}.W", _uniform(rng, w_in, (w_in, w_out))))
            self.biases.append(Parameter(f"{name}.{i}.b", np.zeros(w_out)))

    def parameters(self):
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"mlp_forward: input extent {x.shape[-1]} does not match width {self.widths[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w.tensor) + b.tensor
            if i != last:
                h = ad.relu(h)
        return h


class LstmEncoder:
    """Single-layer LSTM; returns the final hidden state."""

    def __init__(self, name: str, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        self.w_x = Parameter(f"{name}.Wx", _uniform(rng, input_size, (input_size, 4 * h)))
        self.w_h = Parameter(f"{name}.Wh", _uniform(rng, h, (h, 4 * h)))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate
        self.b = Parameter(f"{name}.b", bias)

    def parameters(self):
        return [self.w_x, self.w_h, self.b]

    def encode(self, seq: Tensor) -> Tensor:
        """seq: [T, batch, input_size] -> final hidden state [batch, hidden]."""
        if seq.ndim != 3 or seq.shape[2] != self.input_size:
            raise ShapeError(f"lstm_encode: expected [T, batch, {self.input_size}], got {seq.shape}")
        t_len, batch, _ = seq.shape
        if t_len == 0:
            raise DataError("lstm_encode: empty sequence")
        hs = self.hidden_size
        h = ad.constant(np.zeros((batch, hs)))
        c = ad.constant(np.zeros((batch, hs)))
        for t in range(t_len):
            x_t = seq[t]
            z = ad.matmul(x_t, self.w_x.tensor) + ad.matmul(h, self.w_h.tensor) + self.b.tensor
            i = ad.sigmoid(z[:, 0 * hs:1 * hs])
            f = ad.sigmoid(z[:, 1 * hs:2 * hs])
            g = ad.tanh(z[:, 2 * hs:3 * hs])
            o = ad.sigmoid(z[:, 3 * hs:4 * hs])
            c = f * c + i * g
            h = o * ad.tanh(c)
        return h


class ConvMlpEncoder:
    """Three same-padding conv1d+ReLU stages, temporal mean-pool, then four
    fully connected layers (ReLU between, identity at the end)."""

    N_CONV = 3
    N_LINEAR = 4

    def __init__(self, name: str, in_channels: int, hidden: int, out_dim: int,
                 kernel_size: int, rng: np.random.Generator):
        self.kernel_size = kernel_size
        self.conv_w = []
        self.conv_b = []
        channels = [in_channels] + [hidden] * self.N_CONV
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            self.conv_w.append(Parameter(
                f"{name}.conv{i}.W", _uniform(rng, c_in * kernel_size, (c_out, c_in, kernel_size))))
            self.conv_b.append(Parameter(f"{name}.conv{i}.b", np.zeros((c_out, 1))))
        widths = [hidden] * self.N_LINEAR + [out_dim]
        self.mlp = MlpBlock(f"{name}.fc", widths, rng)

    def parameters(self):
        convs = [p for pair in zip(self.conv_w, self.conv_b) for p in pair]
        return convs + self.mlp.parameters()

    def encode(self, seq: Tensor) -> Tensor:
        """seq: [batch, channels, T] -> [batch, out_dim]."""
        if seq.ndim != 3:
            raise ShapeError(f"conv_mlp_encode: expected [batch, channels, T], got {seq.shape}")
        if seq.shape[2] < self.kernel_size:
            raise DataError(
                f"conv_mlp_encode: sequence length {seq.shape[2]} shorter than kernel {self.kernel_size}")
        h = seq
        for w, b in zip(self.conv_w, self.conv_b):
            h = ad.relu(ad.conv1d(h, w.tensor) + b.tensor)
        pooled = h.mean(axis=2)
        return self.mlp.forward(pooled)


class GatLayer:
    """Multi-head graph attention over a masked neighborhood.

    Attention scores are a learned linear form on concatenated transformed
    node pairs, passed through LeakyReLU and softmax-normalized over each
    node's neighbors. Head outputs are averaged (not concatenated) and the
    result passes through ReLU.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, heads: int,
                 rng: np.random.Generator, slope: float = ad.LEAKY_SLOPE):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.slope = slope
        self.w = [Parameter(f"{name}.W.h{k}", _uniform(rng, in_dim, (in_dim, out_dim)))
                  for k in range(heads)]
        self.a = [Parameter(f"{name}.a.h{k}", _uniform(rng, 2 * out_dim, (2 * out_dim, 1)))
                  for k in range(heads)]

    def parameters(self):
        return [p for pair in zip(self.w, self.a) for p in pair]

    @staticmethod
    def _mask_of(adjacency) -> np.ndarray:
        matrix = getattr(adjacency, "matrix", adjacency)
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"gat_forward: adjacency must be square, got {matrix.shape}")
        return (matrix > 0).astype(ad.dtype())

    def forward(self, nodes: Tensor, adjacency):
        """nodes: [n, in_dim]; adjacency: n x n (AdjacencyMatrix or array).

        Returns ([n, out_dim], attention [heads, n, n]).
        """
        out, attn = self.forward_seq(nodes.reshape((1,) + tuple(nodes.shape)), adjacency)
        return out[0], attn[:, 0]

    def forward_seq(self, nodes_seq: Tensor, adjacency):
        """Shared-graph batched form: [T, n, in_dim] -> [T, n, out_dim].

        The same adjacency gates every step; attention is [heads, T, n, n].
        """
        mask = self._mask_of(adjacency)
        n = nodes_seq.shape[1]
        if mask.shape[0] != n:
            raise ShapeError(f"gat_forward: {n} nodes but adjacency is {mask.shape}")
        d_out = self.out_dim
        total = None
        attn = np.empty((self.heads,) + (nodes_seq.shape[0], n, n), dtype=ad.dtype())
        for k in range(self.heads):
            wh = ad.matmul(nodes_seq, self.w[k].tensor)          # [T, n, d_out]
            a1 = self.a[k].tensor[:d_out]
            a2 = self.a[k].tensor[d_out:]
            f1 = ad.matmul(wh, a1)                               # [T, n, 1]
            f2 = ad.matmul(wh, a2)
            scores = ad.leaky_relu(f1 + ad.transpose(f2, (0, 2, 1)), self.slope)
            alpha = masked_softmax(scores, mask)                 # [T, n, n]
            attn[k] = alpha.data
            head_out = ad.matmul(alpha, wh)
            total = head_out if total is None else total + head_out
        averaged = total * ad.constant(1.0 / self.heads)
        return ad.relu(averaged), attn


class CrossAttention:
    """Multi-head scaled dot-product attention from target queries over a
    context set; heads are concatenated and linearly projected."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"cross-attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = Parameter(f"{name}.Wq", _uniform(rng, dim, (dim, dim)))
        self.w_k = Parameter(f"{name}.Wk", _uniform(rng, dim, (dim, dim)))
        self.w_v = Parameter(f"{name}.Wv", _uniform(rng, dim, (dim, dim)))
        self.w_o = Parameter(f"{name}.Wo", _uniform(rng, dim, (dim, dim)))

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def attend(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        """queries: [k, dim]; keys/values: [m, dim] -> [k, dim]."""
        if keys.shape[0] == 0:
            raise DataError("cross_attend: empty context")
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise ShapeError(
                f"cross_attend: expected feature dim {self.dim}, got {queries.shape} / {keys.shape}")
        q = ad.matmul(queries, self.w_q.tensor)
        k = ad.matmul(keys, self.w_k.tensor)
        v = ad.matmul(values, self.w_v.tensor)
        scale = ad.constant(1.0 / np.sqrt(self.head_dim))
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            scores = ad.matmul(q[:, lo:hi], ad.transpose(k[:, lo:hi])) * scale
            alpha = ad.softmax_rows(scores)
            outs.append(ad.matmul(alpha, v[:, lo:hi]))
        merged = ad.concat(outs, axis=1)
        return ad.matmul(merged, self.w_o.tensor)
