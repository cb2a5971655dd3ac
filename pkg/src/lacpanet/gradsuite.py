"""Finite-difference checks of every differentiable op and of the full loss."""
from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T
from .gradcheck import GradCheckReport, KinkCrossingError, check_gradients, merge_reports

H = 1e-4
REL_TOL = 1e-4
ABS_TOL = 1e-6


def _readout(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Scalar ``sum(out * weights)`` so every output entry gets its own cotangent."""
    return T.sum(T.mul(out, T.Tensor(weights)))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _case_conv(rng, stride, channels_last=False):
    if channels_last:
        shape = (2, 4, 4, 2, 2)  # batched [B, H, W, D, C]
    else:
        shape = (2, 4, 4, 4) if stride == 2 else (2, 3, 4, 3)
    inputs = {"x": rng.normal(size=shape), "kernel": rng.normal(size=(3, 2, 3, 3, 3)), "bias": rng.normal(size=3)}
    out_shape = T.conv3d(T.Tensor(inputs["x"]), T.Tensor(inputs["kernel"]), T.Tensor(inputs["bias"]),
                         stride, channels_last).shape
    w = rng.normal(size=out_shape)
    return inputs, lambda t: _readout(T.conv3d(t["x"], t["kernel"], t["bias"], stride, channels_last), w)


def _case_instance_norm(rng):
    inputs = {"x": rng.normal(size=(2, 3, 3, 2)), "gamma": rng.normal(size=2), "beta": rng.normal(size=2)}
    w = rng.normal(size=(2, 3, 3, 2))
    return inputs, lambda t: _readout(T.instance_norm(t["x"], t["gamma"], t["beta"], 1e-5), w)


def _case_leaky_relu(rng):
    inputs = {"x": _away_from_zero(rng, (4, 5))}
    w = rng.normal(size=(4, 5))
    return inputs, lambda t: _readout(T.leaky_relu(t["x"], 0.01), w)


def _case_matmul(rng):
    inputs = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    w = rng.normal(size=(3, 2))
    return inputs, lambda t: _readout(T.matmul(t["a"], t["b"]), w)


def _case_softmax(rng):
    inputs = {"x": rng.normal(size=(3, 4))}
    w = rng.normal(size=(3, 4))
    return inputs, lambda t: _readout(T.softmax_rows(t["x"]), w)


def _case_cross_entropy(rng):
    label = int(rng.integers(5))
    return {"logits": rng.normal(size=5)}, lambda t: T.cross_entropy(t["logits"], label)


def _case_map(rng):
    mask = (rng.random((4, 4, 2)) < 0.4).astype(float)
    mask[0, 0, 0] = 1.0
    w = rng.normal(size=3)
    return {"feature": rng.normal(size=(4, 4, 2, 3))}, lambda t: _readout(T.masked_average_pool(t["feature"], mask), w)


def _case_attention(rng):
    inputs = {k: rng.normal(size=(4, 3)) for k in ("q", "k", "v")}
    w = rng.normal(size=(4, 3))
    wa = rng.normal(size=(4, 4))

    def fn(t):
        f_out, a = M.cross_phase_attention(t["q"], t["k"], t["v"], 0.1)
        return T.add(_readout(f_out, w), _readout(a, wa))
    return inputs, fn


def _case_fully_connected(rng):
    inputs = {"x": rng.normal(size=6), "weight": rng.normal(size=(6, 4)), "bias": rng.normal(size=4)}
    w = rng.normal(size=4)
    return inputs, lambda t: _readout(T.fully_connected(t["x"], t["weight"], t["bias"]), w)


def _case_elementwise(rng):
    inputs = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3)), "c": rng.normal(size=3)}
    w = rng.normal(size=(3, 4))

    def fn(t):
        x = T.add(T.mul(t["a"], t["b"]), t["c"])  # broadcast add
        x = T.sub(x, T.scalar_mul(t["a"], 0.5))
        x = T.concat([x, T.mean(t["b"], axis=0, keepdims=True)], axis=0)
        x = T.transpose(T.reshape(x, (3, 3)), (1, 0))
        x = T.concat([x, T.sum(x, axis=1, keepdims=True)], axis=1)
        return _readout(x, w)
    return inputs, fn


def desk_model_config(**overrides) -> M.ModelConfig:
    base = dict(n_phases=4, base_channels=4, n_classes=5, volume_shape=(8, 8, 4))
    base.update(overrides)
    return M.ModelConfig(**base)


def desk_case(rng, config: M.ModelConfig):
    shape = config.volume_shape
    volumes = rng.normal(size=(config.n_phases,) + shape)
    mask = np.zeros(shape)
    h, w, d = shape
    mask[h // 4: 3 * h // 4, w // 4: 3 * w // 4, 1: d - 1] = 1.0
    mask[rng.random(shape) < 0.1] = 1.0
    return volumes, mask, int(rng.integers(config.n_classes))


def activation_pattern(root: T.Tensor) -> np.ndarray:
    """Signs of every leaky-ReLU input in the graph below ``root``, in a fixed order."""
    signs = []
    for node in T._topological_order(root):
        if node.op == "leaky_relu":
            signs.append((node._parents[0].data > 0).reshape(-1))
    return np.concatenate(signs) if signs else np.zeros(0, dtype=bool)


def check_model_loss(seed: int, config: M.ModelConfig | None = None, max_entries: int = 4,
                     max_nudges: int = 20) -> GradCheckReport:
    """Full-loss check; samples ``max_entries`` coordinates of every parameter tensor.

    If a probe straddles a leaky-ReLU kink the input volumes are nudged by a
    small random offset and the check restarts.
    """
    config = config or desk_model_config()
    rng = np.random.default_rng(seed)
    params = M.init_params(config, seed)
    volumes, mask, label = desk_case(rng, config)
    for _ in range(max_nudges):
        def fn(t, volumes=volumes):
            return M.loss(volumes, mask, label, M.ModelParams(dict(t)), config)
        try:
            return check_gradients(fn, params.arrays(), op_name="lacpanet_loss", h=H, rel_tol=REL_TOL,
                                   abs_tol=ABS_TOL, max_entries=max_entries, seed=seed, pattern=activation_pattern)
        except KinkCrossingError:
            volumes = volumes + 1e-2 * rng.normal(size=volumes.shape)
    raise KinkCrossingError(f"no kink-free instance found after {max_nudges} nudges (seed {seed})")


OP_CASES = {
    "conv3d_stride1": lambda rng: _case_conv(rng, 1),
    "conv3d_stride2": lambda rng: _case_conv(rng, 2),
    "conv3d_channels_last": lambda rng: _case_conv(rng, 2, channels_last=True),
    "instance_norm": _case_instance_norm,
    "leaky_relu": _case_leaky_relu,
    "matmul": _case_matmul,
    "softmax_rows": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "masked_average_pool": _case_map,
    "cross_phase_attention": _case_attention,
    "fully_connected": _case_fully_connected,
    "elementwise": _case_elementwise,
}


def check_op(name: str, instances: int = 5, seed: int = 0) -> GradCheckReport:
    reports = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        inputs, fn = OP_CASES[name](rng)
        reports.append(check_gradients(fn, inputs, op_name=name, h=H, rel_tol=REL_TOL, abs_tol=ABS_TOL))
    return merge_reports(name, reports)


def run_suite(instances: int = 5, seed: int = 0, model_config: M.ModelConfig | None = None) -> list[GradCheckReport]:
    """One report row per differentiable op plus one for the end-to-end loss."""
    rows = [check_op(name, instances, seed) for name in OP_CASES]
    rows.append(merge_reports("lacpanet_loss", [check_model_loss(seed * 1000 + i, model_config)
                                                for i in range(instances)]))
    return rows
