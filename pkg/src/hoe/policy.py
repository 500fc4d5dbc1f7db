"""Toy policy networks built from plugin linear layers.

Every linear module computes ``W_pre x + b + sum_j omega_j * gamma_j * up_j (down_j x)``
where ``omega`` may be fixed or produced by router layers from ``x`` itself.
Forward passes keep a cache so the same code path yields exact gradients for
the weight matrices (dense training), the router layers (router training)
and the per-objective value heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from hoe.errors import IncompatibleModels, InvalidInput
from hoe.numkernel import DTYPE, RngStream, log_softmax, sample_categorical_batch, softmax


@dataclass
class AttachedExpert:
    expert_id: str
    down: np.ndarray  # rank x d_in
    up: np.ndarray  # d_out x rank
    gamma: float


@dataclass
class PluginLinear:
    module_path: str
    w_pre: np.ndarray  # d_out x d_in
    bias: np.ndarray  # d_out
    attached: list[AttachedExpert] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return int(self.w_pre.shape[1])

    @property
    def d_out(self) -> int:
        return int(self.w_pre.shape[0])

    def attach(self, expert: AttachedExpert) -> None:
        if expert.down.shape[1] != self.d_in or expert.up.shape[0] != self.d_out:
            raise IncompatibleModels(
                f"{self.module_path}: expert {expert.expert_id} factors {expert.up.shape}x{expert.down.shape} "
                f"do not fit ({self.d_out}, {self.d_in})"
            )
        self.attached.append(expert)


def plugin_forward(layer: PluginLinear, x, omega_l) -> np.ndarray:
    """Plugin layer output for a single input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    omega = np.asarray(omega_l, dtype=np.float64)
    if omega.shape[-1:] != (len(layer.attached),):
        raise InvalidInput(f"omega has {omega.shape[-1:]} entries for {len(layer.attached)} attached experts")
    if x.shape[-1] != layer.d_in:
        raise InvalidInput(f"input width {x.shape[-1]} != {layer.d_in}")
    y = x @ layer.w_pre.T.astype(np.float64) + layer.bias
    for j, ex in enumerate(layer.attached):
        contrib = ex.gamma * ((x @ ex.down.T.astype(np.float64)) @ ex.up.T.astype(np.float64))
        y = y + omega[..., j, None] * contrib
    return y


@dataclass
class PolicyNetwork:
    """MLP trunk of plugin layers, tanh between layers, N value heads.

    ``unembed`` (action_count x out_width), when present, is a frozen token
    embedding: logits = unembed @ act(last layer output), where ``act`` is
    the identity or softplus (``out_activation``).
    """

    layers: list[PluginLinear]
    value_w: np.ndarray  # N x hidden
    value_b: np.ndarray  # N
    unembed: np.ndarray | None = None
    out_activation: str = "identity"

    @property
    def action_count(self) -> int:
        if self.unembed is not None:
            return int(self.unembed.shape[0])
        return self.layers[-1].d_out

    @property
    def obs_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def n_objectives(self) -> int:
        return int(self.value_w.shape[0])

    def module_paths(self) -> list[str]:
        return [layer.module_path for layer in self.layers]

    def weights(self) -> dict[str, np.ndarray]:
        return {layer.module_path: layer.w_pre for layer in self.layers}

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "PolicyNetwork":
        """Copy with replaced weight matrices (biases, heads and unembedding shared)."""
        if set(weights) != set(self.module_paths()):
            raise IncompatibleModels("weight map does not cover exactly the plugin modules")
        layers = []
        for layer in self.layers:
            w = np.asarray(weights[layer.module_path], dtype=DTYPE)
            if w.shape != layer.w_pre.shape:
                raise IncompatibleModels(f"{layer.module_path}: {w.shape} vs {layer.w_pre.shape}")
            layers.append(PluginLinear(layer.module_path, w, layer.bias, []))
        return replace(self, layers=layers)

    def with_heads(self, value_w, value_b) -> "PolicyNetwork":
        return replace(self, value_w=np.asarray(value_w, dtype=DTYPE), value_b=np.asarray(value_b, dtype=DTYPE))

    def bare(self) -> "PolicyNetwork":
        """Copy with no attached experts."""
        return replace(self, layers=[PluginLinear(l.module_path, l.w_pre, l.bias, []) for l in self.layers])


def init_policy(
    obs_dim: int,
    action_count: int,
    n_objectives: int,
    rng: RngStream,
    hidden: Sequence[int] = (32, 32),
    unembed: np.ndarray | None = None,
    output_scale: float = 0.01,
    out_activation: str = "identity",
) -> PolicyNetwork:
    """Random base network; the output layer starts near zero so the policy is near uniform."""
    if out_activation not in ("identity", "softplus"):
        raise InvalidInput(f"unknown output activation {out_activation!r}")
    out_width = action_count if unembed is None else int(unembed.shape[1])
    widths = [obs_dim, *hidden, out_width]
    layers = []
    for i in range(len(widths) - 1):
        d_in, d_out = widths[i], widths[i + 1]
        scale = 1.0 / np.sqrt(d_in)
        if i == len(widths) - 2:
            scale *= output_scale
        w = rng.normal((d_out, d_in), scale=scale).astype(DTYPE)
        layers.append(PluginLinear(f"layers.{i}", w, np.zeros(d_out, dtype=DTYPE)))
    return PolicyNetwork(
        layers=layers,
        value_w=np.zeros((n_objectives, widths[-2]), dtype=DTYPE),
        value_b=np.zeros(n_objectives, dtype=DTYPE),
        unembed=None if unembed is None else np.asarray(unembed, dtype=DTYPE),
        out_activation=out_activation,
    )


# --------------------------------------------------------------------------
# routing inside a forward pass


@dataclass
class RouterLayer:
    """One router's scorer for one module: softmax(weight @ x + bias) over ``idx``.

    ``key`` names the gradient entries (``key + ".w"`` / ``key + ".b"``).
    """

    weight: np.ndarray  # k x d_in
    bias: np.ndarray  # k
    idx: np.ndarray  # k indices into the layer's attached experts
    coef: float
    key: str = ""


@dataclass
class LayerRouting:
    """omega(x) = fixed + sum_r coef_r * scatter(softmax(router_r(x)))."""

    n_experts: int
    fixed: np.ndarray | None = None
    routers: list[RouterLayer] = field(default_factory=list)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        omega = np.zeros((x.shape[0], self.n_experts))
        if self.fixed is not None:
            omega = omega + self.fixed
        probs = []
        for r in self.routers:
            p = softmax(x @ r.weight.T + r.bias, axis=1)
            # a router's assigned experts are distinct, so fancy-index += is safe
            omega[:, r.idx] += r.coef * p
            probs.append(p)
        return omega, probs

    def backward(self, g_omega: np.ndarray, x: np.ndarray, probs: list[np.ndarray], grads: dict) -> np.ndarray:
        gx = np.zeros_like(x)
        for r, p in zip(self.routers, probs):
            gp = r.coef * g_omega[:, r.idx]
            gs = p * (gp - np.sum(p * gp, axis=1, keepdims=True))
            if r.key:
                grads[r.key + ".w"] = grads.get(r.key + ".w", 0) + gs.T @ x
                grads[r.key + ".b"] = grads.get(r.key + ".b", 0) + gs.sum(axis=0)
            gx += gs @ r.weight
        return gx


def fixed_routing(omega_l, n_experts: int) -> LayerRouting:
    return LayerRouting(n_experts=n_experts, fixed=np.asarray(omega_l, dtype=np.float64))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    hidden: list[np.ndarray]  # post-activation outputs of non-final layers
    omegas: list[np.ndarray | None]
    contribs: list[list[np.ndarray]]
    probs: list[list[np.ndarray]]
    out: np.ndarray  # last layer output before the output activation
    logits: np.ndarray
    values: np.ndarray


def forward(
    net: PolicyNetwork,
    obs: np.ndarray,
    routing: Sequence[LayerRouting | None] | None = None,
    weights: Mapping[str, np.ndarray] | None = None,
    heads: tuple[np.ndarray, np.ndarray] | None = None,
) -> ForwardCache:
    """Batched forward pass; ``weights`` / ``heads`` override the stored tensors (training)."""
    x = np.asarray(obs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    routing = routing or [None] * len(net.layers)
    inputs, hidden, omegas, contribs, probs = [], [], [], [], []
    n = len(net.layers)
    for i, layer in enumerate(net.layers):
        w = weights[layer.module_path] if weights is not None else layer.w_pre
        inputs.append(x)
        y = x @ np.asarray(w, dtype=np.float64).T + layer.bias
        r = routing[i]
        cs = []
        if r is not None and layer.attached:
            omega, ps = r.forward(x)
            for j, ex in enumerate(layer.attached):
                c = ex.gamma * ((x @ ex.down.T.astype(np.float64)) @ ex.up.T.astype(np.float64))
                cs.append(c)
                y = y + omega[:, j, None] * c
            omegas.append(omega)
            probs.append(ps)
        else:
            omegas.append(None)
            probs.append([])
        contribs.append(cs)
        if i < n - 1:
            x = np.tanh(y)
            hidden.append(x)
        else:
            out = y
    feat = _softplus(out) if net.out_activation == "softplus" else out
    logits = feat @ net.unembed.T.astype(np.float64) if net.unembed is not None else feat
    h_last = hidden[-1] if hidden else inputs[0]
    vw, vb = heads if heads is not None else (net.value_w, net.value_b)
    values = h_last @ np.asarray(vw, dtype=np.float64).T + vb
    return ForwardCache(inputs, hidden, omegas, contribs, probs, out, logits, values)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def backward(
    net: PolicyNetwork,
    cache: ForwardCache,
    routing: Sequence[LayerRouting | None] | None,
    g_logits: np.ndarray | None = None,
    g_values: np.ndarray | None = None,
    weights: Mapping[str, np.ndarray] | None = None,
    train_weights: bool = False,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its partials w.r.t. logits and values.

    Weight-matrix grads are keyed ``w:<module_path>``; router grads use the
    RouterLayer keys; value heads use ``value_w`` / ``value_b``. Value heads
    read the last hidden state with gradients stopped (they never shape the
    trunk or routers).
    """
    grads: dict[str, np.ndarray] = {}
    routing = routing or [None] * len(net.layers)
    if g_values is not None:
        h_last = cache.hidden[-1] if cache.hidden else cache.inputs[0]
        grads["value_w"] = g_values.T @ h_last
        grads["value_b"] = g_values.sum(axis=0)
    if g_logits is None:
        return grads
    g = g_logits @ net.unembed.astype(np.float64) if net.unembed is not None else g_logits
    if net.out_activation == "softplus":
        g = g * _sigmoid(cache.out)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        if i < len(net.layers) - 1:
            h = cache.hidden[i]
            g = g * (1.0 - h * h)
        x = cache.inputs[i]
        w = weights[layer.module_path] if weights is not None else layer.w_pre
        if train_weights:
            grads["w:" + layer.module_path] = g.T @ x
        gx = g @ np.asarray(w, dtype=np.float64)
        omega = cache.omegas[i]
        if omega is not None:
            g_omega = np.stack([np.sum(g * c, axis=1) for c in cache.contribs[i]], axis=1)
            for j, ex in enumerate(layer.attached):
                gx += (omega[:, j, None] * ex.gamma) * ((g @ ex.up.astype(np.float64)) @ ex.down.astype(np.float64))
            gx += routing[i].backward(g_omega, x, cache.probs[i], grads)
        g = gx
    return grads


# --------------------------------------------------------------------------
# convenience wrappers


def _routing_from_omega(net: PolicyNetwork, omega_l) -> list[LayerRouting | None]:
    if omega_l is None:
        return [None] * len(net.layers)
    if isinstance(omega_l, (list, tuple)) and len(omega_l) == len(net.layers) and not np.isscalar(omega_l[0]):
        per_layer = omega_l
    else:
        per_layer = [omega_l] * len(net.layers)
    out = []
    for layer, om in zip(net.layers, per_layer):
        om = np.asarray(om, dtype=np.float64)
        if om.shape[-1:] != (len(layer.attached),):
            raise InvalidInput(f"{layer.module_path}: omega has {om.shape[-1:]} entries for {len(layer.attached)} experts")
        out.append(fixed_routing(om, len(layer.attached)) if layer.attached else None)
    return out


def logits(net: PolicyNetwork, state, omega_l=None) -> np.ndarray:
    """Action logits for one observation (or a batch); ``omega_l`` per layer or shared."""
    obs = np.asarray(state, dtype=np.float64)
    out = forward(net, obs, _routing_from_omega(net, omega_l)).logits
    return out[0] if obs.ndim == 1 else out


def act(net: PolicyNetwork, state, omega_l, rng: RngStream) -> tuple[int, float]:
    z = logits(net, state, omega_l)
    lp = log_softmax(z)
    a = int(sample_categorical_batch(np.exp(lp)[None, :], rng)[0])
    return a, float(lp[a])


def entropy_and_grad(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise entropy of softmax(z) and its gradient w.r.t. z."""
    lp = log_softmax(z)
    p = np.exp(lp)
    h = -np.sum(p * lp, axis=1)
    return h, -p * (lp + h[:, None])


# --------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryBatch:
    """Fixed-horizon episodes, one per row: arrays are (episodes, T[, N])."""

    states: np.ndarray  # int, index of the previous token (start symbol = V)
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    gamma: float = 1.0
    advantages: np.ndarray | None = None
    raw_advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def episodes(self) -> int:
        return int(self.actions.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[1])

    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def gae_per_objective(batch: TrajectoryBatch, gae_lambda: float, gamma: float, normalize: bool = True) -> TrajectoryBatch:
    """Per-objective generalised advantage estimation (episodes end at T, terminal value 0)."""
    r = np.asarray(batch.rewards, dtype=np.float64)
    v = np.asarray(batch.values, dtype=np.float64)
    if r.shape != v.shape:
        raise InvalidInput(f"rewards {r.shape} and values {v.shape} differ")
    E, T, N = r.shape
    adv = np.zeros_like(r)
    next_v = np.zeros((E, N))
    running = np.zeros((E, N))
    for t in reversed(range(T)):
        delta = r[:, t] + gamma * next_v - v[:, t]
        running = delta + gamma * gae_lambda * running
        adv[:, t] = running
        next_v = v[:, t]
    returns = adv + v
    normed = adv
    if normalize:
        flat = adv.reshape(-1, N)
        normed = (adv - flat.mean(axis=0)) / (flat.std(axis=0) + 1e-8)
    return replace(batch, gamma=gamma, advantages=normed, raw_advantages=adv, returns=returns)
