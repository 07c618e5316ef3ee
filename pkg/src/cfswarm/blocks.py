"""Neural building blocks: MLPs, a GRU cell, message-passing GNNs and
Gaussian output heads.

Blocks own no arrays; they register named parameters in a ParamStore and
evaluate against a `leaves` dict (name -> Tensor), which is either the
store's raw parameters (inference) or tape-attached copies (training).
"""

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .optim import ParamStore
from .rng import Rng

SIGMA_FLOOR = 1e-4


def _rows(x, width):
    """Collapse leading axes so the last axis becomes matmul-ready."""
    if x.array.ndim == 2:
        return x, None
    lead = x.array.shape[:-1]
    return T.reshape(x, (-1, width)), lead


def _unrows(y, lead, width):
    if lead is None:
        return y
    return T.reshape(y, lead + (width,))


class Mlp:
    """Dense stack with tanh hidden activations.

    `sizes` lists [input, hidden..., output]; the output activation is
    "identity" or "sigmoid".  Weights init uniform +-1/sqrt(fan_in), biases 0.
    """

    def __init__(self, name: str, sizes, out_activation: str = "identity"):
        if len(sizes) < 2:
            raise ContractError("an Mlp needs at least input and output sizes")
        if out_activation not in ("identity", "sigmoid"):
            raise ContractError(f"unsupported output activation {out_activation!r}")
        self.name = name
        self.sizes = [int(s) for s in sizes]
        self.out_activation = out_activation

    def register(self, store: ParamStore, rng: Rng) -> None:
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            store.add_uniform(f"{self.name}.w{i}", (n_in, n_out), n_in, rng)
            store.add_uniform(f"{self.name}.b{i}", (n_out,), 0, rng)

    def forward(self, leaves, x):
        x = T._lift(x)
        if x.array.shape[-1] != self.sizes[0]:
            raise DimensionError(
                f"{self.name}: expected trailing dim {self.sizes[0]}, "
                f"got {x.array.shape}")
        y, lead = _rows(x, self.sizes[0])
        last = len(self.sizes) - 2
        for i in range(last + 1):
            y = T.add(T.matmul(y, leaves[f"{self.name}.w{i}"]),
                      leaves[f"{self.name}.b{i}"])
            if i < last:
                y = T.tanh(y)
            elif self.out_activation == "sigmoid":
                y = T.sigmoid(y)
        return _unrows(y, lead, self.sizes[-1])

    __call__ = forward


def mlp_forward(mlp: Mlp, leaves, x):
    return mlp.forward(leaves, x)


class GruCell:
    """Single-step GRU: h' = (1 - z) * h + z * htilde."""

    def __init__(self, name: str, n_in: int, n_hidden: int):
        self.name = name
        self.n_in = int(n_in)
        self.n_hidden = int(n_hidden)

    def register(self, store: ParamStore, rng: Rng) -> None:
        for gate in ("z", "r", "h"):
            store.add_uniform(f"{self.name}.w{gate}", (self.n_in, self.n_hidden),
                              self.n_in, rng)
            store.add_uniform(f"{self.name}.u{gate}", (self.n_hidden, self.n_hidden),
                              self.n_hidden, rng)
            store.add_uniform(f"{self.name}.b{gate}", (self.n_hidden,), 0, rng)

    def step(self, leaves, x, h):
        x, h = T._lift(x), T._lift(h)
        if x.array.shape[-1] != self.n_in or h.array.shape[-1] != self.n_hidden:
            raise DimensionError(f"{self.name}: bad GRU input widths")
        xf, lead = _rows(x, self.n_in)
        hf, _ = _rows(h, self.n_hidden)
        name = self.name
        z = T.sigmoid(T.add(T.add(T.matmul(xf, leaves[f"{name}.wz"]),
                                  T.matmul(hf, leaves[f"{name}.uz"])),
                            leaves[f"{name}.bz"]))
        r = T.sigmoid(T.add(T.add(T.matmul(xf, leaves[f"{name}.wr"]),
                                  T.matmul(hf, leaves[f"{name}.ur"])),
                            leaves[f"{name}.br"]))
        cand = T.tanh(T.add(T.add(T.matmul(xf, leaves[f"{name}.wh"]),
                                  T.matmul(T.mul(r, hf), leaves[f"{name}.uh"])),
                            leaves[f"{name}.bh"]))
        out = T.add(T.mul(T.sub(1.0, z), hf), T.mul(z, cand))
        return _unrows(out, lead, self.n_hidden)

    __call__ = step


def gru_step(cell: GruCell, leaves, x, h):
    return cell.step(leaves, x, h)


class GnnBlock:
    """One round of message passing on the complete directed graph.

    Edge network f_e maps the concatenated ordered pair [v_k, v_j] to an edge
    vector; node network f_v maps the sum over j != k of incoming edges to the
    output.  With a single node there are no edges and f_v sees a zero vector.
    """

    def __init__(self, name: str, n_in: int, n_hidden: int, n_edge: int, n_out: int):
        self.name = name
        self.n_in = int(n_in)
        self.n_edge = int(n_edge)
        self.n_out = int(n_out)
        self.f_e = Mlp(f"{name}.fe", [2 * n_in, n_hidden, n_edge])
        self.f_v = Mlp(f"{name}.fv", [n_edge, n_hidden, n_out])

    def register(self, store: ParamStore, rng: Rng) -> None:
        self.f_e.register(store, rng)
        self.f_v.register(store, rng)

    def forward(self, leaves, nodes):
        """nodes (B, K, F) -> (B, K, n_out); also accepts (K, F)."""
        nodes = T._lift(nodes)
        squeeze = nodes.array.ndim == 2
        if squeeze:
            nodes = T.reshape(nodes, (1,) + nodes.array.shape)
        if nodes.array.ndim != 3 or nodes.array.shape[-1] != self.n_in:
            raise DimensionError(f"{self.name}: expected (B, K, {self.n_in}) nodes")
        b, k, f = nodes.array.shape
        flat = T.reshape(nodes, (b * k, f))
        # f_e's first layer over [v_k, v_j] splits into two node projections,
        # which avoids materializing the K*(K-1) pair concatenation
        w0 = leaves[f"{self.name}.fe.w0"]
        top = T.slice_axis(w0, 0, 0, f)
        bot = T.slice_axis(w0, 0, f, 2 * f)
        m = self.f_e.sizes[1]
        proj_k = T.reshape(T.matmul(flat, top), (b, k, 1, m))
        proj_j = T.reshape(T.matmul(flat, bot), (b, 1, k, m))
        pre = T.add(T.add(proj_k, proj_j), leaves[f"{self.name}.fe.b0"])
        hidden = T.tanh(pre)
        edges = T.add(
            T.reshape(T.matmul(T.reshape(hidden, (b * k * k, m)),
                               leaves[f"{self.name}.fe.w1"]),
                      (b, k, k, self.n_edge)),
            leaves[f"{self.name}.fe.b1"])
        offdiag = (1.0 - np.eye(k, dtype=np.float64)).reshape(1, k, k, 1)
        agg = T.sum_axis(T.mul(edges, offdiag), axis=2)
        out = self.f_v(leaves, T.reshape(agg, (b * k, self.n_edge)))
        out = T.reshape(out, (b, k, self.n_out))
        if squeeze:
            out = T.reshape(out, (k, self.n_out))
        return out

    __call__ = forward


def gnn_forward(block: GnnBlock, leaves, nodes):
    return block.forward(leaves, nodes)


class FlatBlock:
    """MLP over flattened K x F input, reshaped back to per-agent outputs.

    Drop-in replacement for GnnBlock when graph structure is ablated; it is
    not permutation equivariant by design.
    """

    def __init__(self, name: str, n_agents: int, n_in: int, n_hidden: int, n_out: int):
        self.name = name
        self.n_agents = int(n_agents)
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.mlp = Mlp(f"{name}.flat", [n_agents * n_in, n_hidden, n_agents * n_out])

    def register(self, store: ParamStore, rng: Rng) -> None:
        self.mlp.register(store, rng)

    def forward(self, leaves, nodes):
        nodes = T._lift(nodes)
        squeeze = nodes.array.ndim == 2
        if squeeze:
            nodes = T.reshape(nodes, (1,) + nodes.array.shape)
        b, k, f = nodes.array.shape
        if k != self.n_agents or f != self.n_in:
            raise DimensionError(f"{self.name}: expected (B, {self.n_agents}, {self.n_in})")
        out = self.mlp(leaves, T.reshape(nodes, (b, k * f)))
        out = T.reshape(out, (b, k, self.n_out))
        if squeeze:
            out = T.reshape(out, (k, self.n_out))
        return out

    __call__ = forward


class GaussianHead:
    """Linear mu head and a softplus-floored sigma head."""

    def __init__(self, name: str, n_in: int, n_out: int):
        self.name = name
        self.n_in = int(n_in)
        self.n_out = int(n_out)

    def register(self, store: ParamStore, rng: Rng) -> None:
        store.add_uniform(f"{self.name}.wmu", (self.n_in, self.n_out), self.n_in, rng)
        store.add_uniform(f"{self.name}.bmu", (self.n_out,), 0, rng)
        store.add_uniform(f"{self.name}.wsig", (self.n_in, self.n_out), self.n_in, rng)
        store.add_uniform(f"{self.name}.bsig", (self.n_out,), 0, rng)

    def forward(self, leaves, x):
        x = T._lift(x)
        xf, lead = _rows(x, self.n_in)
        mu = T.add(T.matmul(xf, leaves[f"{self.name}.wmu"]), leaves[f"{self.name}.bmu"])
        raw = T.add(T.matmul(xf, leaves[f"{self.name}.wsig"]), leaves[f"{self.name}.bsig"])
        sigma = T.add(T.softplus(raw), SIGMA_FLOOR)
        return _unrows(mu, lead, self.n_out), _unrows(sigma, lead, self.n_out)

    __call__ = forward


def gaussian_head_forward(head: GaussianHead, leaves, x):
    return head.forward(leaves, x)


def treatment_head(mlp: Mlp, leaves, z, lambda_grl: float = 1.0):
    """Propensity probability from a gradient-reversed representation.

    Returns (probability, logits).  The reversal scale only shapes the
    backward pass; forward values are identical for any positive scale.
    """
    logits = mlp.forward(leaves, T.grad_reverse(z, lambda_grl))
    return T.sigmoid(logits), logits
