"""
Feedforward guidance-and-control networks.

A :class:`NetSpec` is evaluated with the same code over floats and over
:class:`~neurostab.dalgebra.TPoly` arrays, which gives exact input Jacobians
(first-order polynomials) and arbitrary-order expansions for free.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import dalgebra as da
from .exceptions import ConvergenceError, ValidationError
from .odeflow import QuadParams

FORMAT_VERSION = 1

ACTIVATIONS = {
    "softplus": da.softplus,
    "tanh": np.tanh,
    "linear": lambda h: h,
}


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "softplus"

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if W.shape[0] != b.shape[0]:
            raise ValidationError(f"bias length {b.shape[0]} != weight rows {W.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class NetSpec:
    """Layered network ``post(sigma_l(W_l ... sigma_0(W_0 pre(x) + b_0) ... + b_l))``.

    ``pre`` maps inputs to ``(x - pre_shift) / pre_scale`` and ``post`` maps the
    last layer output ``L`` to ``post_scale * L + post_shift``.
    """

    layers: tuple
    pre_shift: np.ndarray = None
    pre_scale: np.ndarray = None
    post_scale: np.ndarray = None
    post_shift: np.ndarray = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValidationError(
                    f"layer dimension chain broken: {a.W.shape} followed by {b.W.shape}"
                )
        n_in, n_out = layers[0].W.shape[1], layers[-1].W.shape[0]

        def vec(v, default, n, name):
            v = np.full(n, default, dtype=float) if v is None else np.asarray(v, dtype=float)
            if v.shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
            return v

        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "pre_shift", vec(self.pre_shift, 0.0, n_in, "pre shift"))
        object.__setattr__(self, "pre_scale", vec(self.pre_scale, 1.0, n_in, "pre scale"))
        object.__setattr__(self, "post_scale", vec(self.post_scale, 1.0, n_out, "post scale"))
        object.__setattr__(self, "post_shift", vec(self.post_shift, 0.0, n_out, "post shift"))
        if np.any(self.pre_scale == 0):
            raise ValidationError("pre scale must be nonzero")

    @property
    def n_inputs(self):
        return self.layers[0].W.shape[1]

    @property
    def n_outputs(self):
        return self.layers[-1].W.shape[0]

    @property
    def architecture(self):
        return tuple(L.W.shape[0] for L in self.layers[:-1])

    @property
    def n_params(self):
        return sum(L.W.size + L.b.size for L in self.layers)

    def __call__(self, x):
        return forward(self, x)


def forward(net, x):
    """Evaluate the network.

    ``x`` is a float array of shape ``(..., n_inputs)`` or a 1-D :class:`TPoly`
    of length ``n_inputs``; the result has the matching type.
    """
    if isinstance(x, da.TPoly):
        n = x.shape[-1] if x.ndim else 0
    else:
        x = np.asarray(x, dtype=float)
        n = x.shape[-1] if x.ndim else 0
    if n != net.n_inputs:
        raise ValidationError(f"network expects {net.n_inputs} inputs, got {n}")
    h = (x - net.pre_shift) / net.pre_scale
    for layer in net.layers:
        h = ACTIVATIONS[layer.activation](h @ layer.W.T + layer.b)
    return h * net.post_scale + net.post_shift


def input_jacobian(net, x):
    """Exact ``dN_k/dx_j`` at ``x``, shape ``(n_outputs, n_inputs)``."""
    cfg = da.AlgebraConfig(net.n_inputs, 1)
    return forward(net, da.make_variables(x, cfg)).gradient()


# -- construction ----------------------------------------------------------------

QUAD_POST_SCALE = np.array([0.5, 1.0])
QUAD_POST_SHIFT = np.array([0.5, 0.0])


def make_network(hidden=(32, 32, 32), n_inputs=5, n_outputs=2, *, pre_shift=None,
                 pre_scale=None, post_scale=QUAD_POST_SCALE, post_shift=QUAD_POST_SHIFT,
                 hidden_activation="softplus", output_activation="tanh", seed=None):
    """Randomly initialised network (Glorot-uniform weights, zero biases).

    The default post transform maps the ``tanh`` range onto ``u1 in [0, 1]``
    and ``u2 in [-1, 1]``.
    """
    rng = np.random.default_rng(seed)
    sizes = [n_inputs, *hidden, n_outputs]
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(rng.uniform(-lim, lim, size=(b, a)), np.zeros(b), act))
    return NetSpec(tuple(layers), pre_shift, pre_scale, post_scale, post_shift)


def parse_arch(spec):
    """``"3x32"`` -> ``(32, 32, 32)``."""
    try:
        depth, width = (int(s) for s in str(spec).lower().split("x"))
    except ValueError:
        raise ValidationError(f"architecture must look like DEPTHxWIDTH, got {spec!r}") from None
    if depth < 1 or width < 1:
        raise ValidationError(f"architecture must be positive, got {spec!r}")
    return (width,) * depth


# -- equilibrium -----------------------------------------------------------------


@dataclass(frozen=True)
class Equilibrium:
    x_hat: np.ndarray
    u_e: np.ndarray
    residual: float
    iterations: int = 0


def _closed_loop_expansion(net, plant, x):
    cfg = da.AlgebraConfig(plant.n_states, 1)
    F = plant.rhs(da.make_variables(x, cfg), net(da.make_variables(x, cfg)))
    return F.constant.copy(), F.gradient()


def find_equilibrium(net, plant=QuadParams(), x_start=None, tol=1e-12, max_iter=50):
    """Root of ``f(x, N(x))`` by damped Newton iteration from ``x_start`` (origin)."""
    x = np.zeros(plant.n_states) if x_start is None else np.array(x_start, dtype=float)
    F, J = _closed_loop_expansion(net, plant, x)
    res = np.max(np.abs(F))
    for it in range(max_iter + 1):
        if res < tol:
            return Equilibrium(x, np.asarray(net(x)), float(res), it)
        if it == max_iter:
            break
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular closed-loop Jacobian", x, res) from None
        alpha = 1.0
        for _ in range(11):
            x_try = x + alpha * step
            F_try, J_try = _closed_loop_expansion(net, plant, x_try)
            res_try = np.max(np.abs(F_try))
            if res_try < res:
                break
            alpha *= 0.5
        else:
            # no decrease: at round-off level this is as good as it gets
            if res < 1e3 * tol:
                return Equilibrium(x, np.asarray(net(x)), float(res), it)
            raise ConvergenceError("line search failed", x, res)
        x, F, J, res = x_try, F_try, J_try, res_try
    raise ConvergenceError(f"no convergence in {max_iter} iterations", x, res)


def shift_axes(net, x_hat):
    """Network ``x -> N(x + x_hat)`` so the shifted closed loop rests at the origin."""
    return replace(net, pre_shift=net.pre_shift - np.asarray(x_hat, dtype=float))


# -- persistence ------------------------------------------------------------------


def to_dict(net):
    return {
        "format": FORMAT_VERSION,
        "pre": {"shift": net.pre_shift.tolist(), "scale": net.pre_scale.tolist()},
        "post": {"scale": net.post_scale.tolist(), "shift": net.post_shift.tolist()},
        "layers": [
            {"W": L.W.tolist(), "b": L.b.tolist(), "act": L.activation} for L in net.layers
        ],
    }


def from_dict(obj):
    try:
        if obj.get("format", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValidationError(f"unsupported weight format {obj.get('format')}")
        layers = tuple(Layer(L["W"], L["b"], L["act"]) for L in obj["layers"])
        return NetSpec(
            layers,
            obj["pre"]["shift"],
            obj["pre"]["scale"],
            obj["post"]["scale"],
            obj["post"]["shift"],
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise ValidationError(f"malformed weight file: {exc}") from None


def dumps(net):
    return json.dumps(to_dict(net), sort_keys=True, indent=1) + "\n"


def save_weights(net, path):
    with open(path, "w") as fh:
        fh.write(dumps(net))


def load_weights(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed weight file {path}: {exc}") from None
    return from_dict(obj)
