"""Central finite-difference checks of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T


class KinkCrossingError(ArithmeticError):
    """A finite-difference probe crossed a non-differentiable point."""


@dataclass
class GradCheckReport:
    op_name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    n_checked: int = 0
    n_kinks: int = 0

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        kinks = f" kinks_skipped={self.n_kinks}" if self.n_kinks else ""
        return (f"{self.op_name:<24s} n={self.n_checked:<6d} "
                f"abs={self.max_abs_err:.3e} rel={self.max_rel_err:.3e} {status}{kinks}")


def check_gradients(
    fn: Callable[[dict[str, T.Tensor]], T.Tensor],
    inputs: Mapping[str, np.ndarray],
    *,
    op_name: str = "f",
    h: float = 1e-4,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    pattern: Callable[[T.Tensor], np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of a scalar ``fn`` with central differences.

    ``fn`` receives fresh leaf tensors built from ``inputs`` and must return a
    scalar.  With ``max_entries`` only that many randomly chosen coordinates
    of each input are probed.  The relative error of a component is
    ``|a - n| / max(|a|, |n|, abs_tol)``, so components whose gradient is
    itself below ``abs_tol`` are judged on absolute error.

    ``pattern`` maps an output graph to a signature of its piecewise branches
    (e.g. activation signs).  A coordinate whose difference quotient misses
    tolerance *and* whose probes change that signature straddles a kink at
    step ``h``; it is replaced by another coordinate and counted in
    ``n_kinks``.  Misses without a branch change are reported as failures.
    """
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in base.items()}
    root = fn(leaves)
    base_pattern = None if pattern is None else pattern(root)
    T.backward(root)

    def evaluate(name, shifted, track):
        args = {k: T.Tensor(v, requires_grad=track) for k, v in base.items()}
        args[name] = T.Tensor(shifted, requires_grad=track)
        return fn(args)

    max_abs = max_rel = 0.0
    count = kinks = 0
    for name, value in base.items():
        analytic = leaves[name].grad
        analytic = np.zeros_like(value) if analytic is None else np.asarray(analytic).reshape(value.shape)
        flat = value.reshape(-1)
        order = np.arange(flat.size) if max_entries is None else rng.permutation(flat.size)
        wanted = flat.size if max_entries is None else min(max_entries, flat.size)
        done = 0
        for idx in order:
            if done >= wanted:
                break
            probes = []
            for sign in (1.0, -1.0):
                shifted = flat.copy()
                shifted[idx] += sign * h
                probes.append(shifted.reshape(value.shape))
            numeric = (evaluate(name, probes[0], False).item() - evaluate(name, probes[1], False).item()) / (2.0 * h)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), abs_tol)
            if pattern is not None and rel >= rel_tol and err >= abs_tol:
                if any(not np.array_equal(pattern(evaluate(name, pr, True)), base_pattern) for pr in probes):
                    kinks += 1
                    continue
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, rel)
            count += 1
            done += 1
        if done < wanted:
            raise KinkCrossingError(f"{op_name}: only {done} of {wanted} coordinates of {name!r} are kink-free at h={h}")
    passed = max_rel < rel_tol or max_abs < abs_tol
    return GradCheckReport(op_name, max_abs, max_rel, bool(passed), count, kinks)


def grad_check(
    f: Callable[[T.Tensor], T.Tensor],
    point,
    h: float = 1e-4,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-6,
    op_name: str = "f",
) -> GradCheckReport:
    """Single-input form of :func:`check_gradients`."""
    return check_gradients(lambda t: f(t["x"]), {"x": np.asarray(point, dtype=np.float64)},
                           op_name=op_name, h=h, rel_tol=rel_tol, abs_tol=abs_tol)


def merge_reports(op_name: str, reports: list[GradCheckReport]) -> GradCheckReport:
    """Fold several instances of one op into a single row (worst case wins)."""
    return GradCheckReport(
        op_name,
        max(r.max_abs_err for r in reports),
        max(r.max_rel_err for r in reports),
        all(r.passed for r in reports),
        sum(r.n_checked for r in reports),
        sum(r.n_kinks for r in reports),
    )
