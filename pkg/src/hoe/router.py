"""Hierarchical assembly: router experts, preference routing and expert composition."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from hoe.adapters import LoraExpert
from hoe.errors import DuplicateExpert, IncompatibleModels, InvalidInput, UnknownModule
from hoe.numkernel import DTYPE, RngStream, log_softmax, sample_categorical_batch
from hoe.policy import AttachedExpert, LayerRouting, PluginLinear, PolicyNetwork, RouterLayer, forward
from hoe.simplex import (
    PreferenceLike,
    PreferenceVector,
    RoutingAssignment,
    convex_coords,
    nearest_experts,
    validate,
)


@dataclass
class RouterExpert:
    """Per-module affine scorer over the ``assigned`` LoRA experts (by id)."""

    id: str
    preference: PreferenceVector
    assigned: tuple[str, ...]
    layers: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # path -> (weight k x d_in, bias k)

    def modules(self) -> list[str]:
        return sorted(self.layers)


def init_router(
    expert_id: str,
    preference: PreferenceLike,
    assigned: Sequence[str],
    base: PolicyNetwork,
    rng: RngStream | None = None,
    scale: float = 0.0,
) -> RouterExpert:
    """Router with zero bias and N(0, scale^2 / d_in) weights (all-zero when scale is 0)."""
    layers = {}
    k = len(assigned)
    for layer in base.layers:
        if rng is not None and scale > 0:
            w = rng.normal((k, layer.d_in), scale=scale / np.sqrt(layer.d_in))
        else:
            w = np.zeros((k, layer.d_in))
        layers[layer.module_path] = (w.astype(DTYPE), np.zeros(k, dtype=DTYPE))
    return RouterExpert(expert_id, validate(preference), tuple(assigned), layers)


def router_scores(r: RouterExpert, module_path: str, x) -> np.ndarray:
    if module_path not in r.layers:
        raise UnknownModule(f"router {r.id} has no layer for {module_path!r}")
    w, b = r.layers[module_path]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise InvalidInput(f"input width {x.shape[-1]} != {w.shape[1]}")
    return x @ w.T.astype(np.float64) + b


@dataclass
class HoeModel:
    base: PolicyNetwork
    lora_registry: list[LoraExpert]
    router_registry: list[RouterExpert]

    @property
    def preferences(self) -> list[PreferenceVector]:
        """Registry preferences: LoRA experts first, then routers."""
        return [e.preference for e in self.lora_registry] + [r.preference for r in self.router_registry]

    @property
    def n_objectives(self) -> int:
        prefs = self.preferences
        return len(prefs[0]) if prefs else self.base.n_objectives

    @property
    def size(self) -> int:
        return len(self.lora_registry) + len(self.router_registry)

    def lora_index(self, expert_id: str) -> int:
        for i, e in enumerate(self.lora_registry):
            if e.id == expert_id:
                return i
        raise KeyError(expert_id)

    @cached_property
    def network(self) -> PolicyNetwork:
        """Base network with every LoRA expert attached to every module, in registry order."""
        layers = []
        for layer in self.base.layers:
            pl = PluginLinear(layer.module_path, layer.w_pre, layer.bias, [])
            for e in self.lora_registry:
                down, up = e.factors[layer.module_path]
                pl.attach(AttachedExpert(e.id, down, up, e.rescale))
            layers.append(pl)
        return replace(self.base, layers=layers)


def assemble(base: PolicyNetwork, lora_experts: Sequence[LoraExpert], router_experts: Sequence[RouterExpert] = ()) -> HoeModel:
    ids = [e.id for e in lora_experts] + [r.id for r in router_experts]
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateExpert(f"duplicate expert id {i!r}")
        seen.add(i)
    shapes = {layer.module_path: (layer.d_out, layer.d_in) for layer in base.bare().layers}
    for e in lora_experts:
        if set(e.factors) != set(shapes):
            raise IncompatibleModels(f"LoRA expert {e.id} covers {sorted(e.factors)}, base has {sorted(shapes)}")
        for m, (down, up) in e.factors.items():
            if up.shape[0] != shapes[m][0] or down.shape[1] != shapes[m][1] or down.shape[0] != up.shape[1]:
                raise IncompatibleModels(f"LoRA expert {e.id}: module {m} factors do not fit {shapes[m]}")
    lora_ids = {e.id for e in lora_experts}
    for r in router_experts:
        missing = [a for a in r.assigned if a not in lora_ids]
        if missing:
            raise IncompatibleModels(f"router {r.id} assigned to unknown LoRA experts {missing}")
        if set(r.layers) != set(shapes):
            raise IncompatibleModels(f"router {r.id} covers {sorted(r.layers)}, base has {sorted(shapes)}")
        for m, (w, b) in r.layers.items():
            if w.shape != (len(r.assigned), shapes[m][1]) or b.shape != (len(r.assigned),):
                raise IncompatibleModels(f"router {r.id}: module {m} has weight {w.shape}, bias {b.shape}")
    dims = {len(p) for p in [e.preference for e in lora_experts] + [r.preference for r in router_experts]}
    if len(dims) > 1:
        raise IncompatibleModels(f"registry preferences have mixed dimensions {sorted(dims)}")
    for p in [e.preference for e in lora_experts] + [r.preference for r in router_experts]:
        validate(p.weights)
    return HoeModel(base.bare(), list(lora_experts), list(router_experts))


def _routing_candidates(model: HoeModel) -> list[int]:
    """Registry indices eligible for routing: one entry per distinct preference.

    A router shadows a LoRA expert sitting at the same preference (it refines
    that vertex); otherwise the lowest index wins.
    """
    prefs = model.preferences
    n_lora = len(model.lora_registry)
    chosen: dict[tuple[float, ...], int] = {}
    for i, p in enumerate(prefs):
        key = p.weights
        if key not in chosen or (i >= n_lora and chosen[key] < n_lora):
            chosen[key] = i
    return sorted(chosen.values())


def route(model: HoeModel, user: PreferenceLike) -> RoutingAssignment:
    """Select the N nearest registry preferences and solve convex coordinates.

    Candidates are taken nearest-first, skipping any that would make the
    selection affinely dependent (e.g. collinear after zero-padding).
    """
    u = validate(user)
    if len(u) != model.n_objectives:
        raise InvalidInput(f"{len(u)}-objective preference for a {model.n_objectives}-objective model")
    prefs = model.preferences
    cand = _routing_candidates(model)
    order = nearest_experts(u, [prefs[i] for i in cand], len(cand))
    picked: list[int] = []
    for j in order:
        trial = picked + [cand[j]]
        pts = np.stack([prefs[i].as_array() for i in trial])
        aug = np.vstack([pts.T, np.ones((1, len(trial)))])
        if np.linalg.matrix_rank(aug, tol=1e-10) == len(trial):
            picked = trial
        if len(picked) == len(u):
            break
    local = convex_coords(u, [prefs[i] for i in picked])
    return local.remap(picked, len(prefs))


def layer_routing(model: HoeModel, assignment: RoutingAssignment, module_path: str) -> LayerRouting:
    """Routing recipe for one module: LoRA picks pass through, routers vote by softmax."""
    n_lora = len(model.lora_registry)
    fixed = np.zeros(n_lora)
    routers = []
    for i, w in zip(assignment.selected, assignment.weights):
        if w == 0.0:
            continue
        if i < n_lora:
            fixed[i] += w
        else:
            r = model.router_registry[i - n_lora]
            if module_path not in r.layers:
                raise UnknownModule(f"router {r.id} has no layer for {module_path!r}")
            weight, bias = r.layers[module_path]
            idx = np.array([model.lora_index(a) for a in r.assigned])
            routers.append(RouterLayer(weight.astype(np.float64), bias.astype(np.float64), idx, float(w), key=r.id))
    return LayerRouting(n_experts=n_lora, fixed=fixed, routers=routers)


def mix_weights(model: HoeModel, assignment: RoutingAssignment, module_path: str, x) -> np.ndarray:
    """omega_l over the LoRA registry for hidden input ``x`` (vector or batch)."""
    xb = np.asarray(x, dtype=np.float64)
    single = xb.ndim == 1
    omega, _ = layer_routing(model, assignment, module_path).forward(xb[None, :] if single else xb)
    return omega[0] if single else omega


def model_routing(model: HoeModel, assignment: RoutingAssignment) -> list[LayerRouting]:
    return [layer_routing(model, assignment, layer.module_path) for layer in model.base.layers]


def hoe_logits(model: HoeModel, user: PreferenceLike, obs: np.ndarray, assignment: RoutingAssignment | None = None) -> np.ndarray:
    """Batched logits; every module routes on its own hidden input."""
    assignment = assignment or route(model, user)
    return forward(model.network, obs, model_routing(model, assignment)).logits


def infer(model: HoeModel, user: PreferenceLike, state, rng: RngStream) -> tuple[int, float]:
    obs = np.asarray(state, dtype=np.float64)
    z = hoe_logits(model, user, obs[None, :] if obs.ndim == 1 else obs)[0]
    lp = log_softmax(z)
    a = int(sample_categorical_batch(np.exp(lp)[None, :], rng)[0])
    return a, float(lp[a])


def add_expert(model: HoeModel, expert: LoraExpert | RouterExpert) -> HoeModel:
    """New model with ``expert`` registered; preferences zero-padded to the larger arity."""
    n_old = model.n_objectives
    n_new = max(n_old, len(expert.preference))
    loras = [replace(e, preference=e.preference.padded(n_new)) for e in model.lora_registry]
    routers = [replace(r, preference=r.preference.padded(n_new)) for r in model.router_registry]
    expert = replace(expert, preference=expert.preference.padded(n_new))
    if isinstance(expert, LoraExpert):
        loras.append(expert)
    else:
        routers.append(expert)
    return assemble(model.base, loras, routers)
