"""Central finite-difference gradient checking.

This is the independent oracle for every analytic gradient in the
package: it never looks at the tape, only at loss values under
coordinate perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Parameter, no_grad


@dataclass
class GradCheckReport:
    """Per-block relative errors between analytic and numeric gradients.

    The block error is ||g_fd - g_an||_2 / max(||g_fd||_2, ||g_an||_2, floor),
    a norm-level comparison that stays well conditioned when individual
    entries are near zero.
    """

    epsilon: float
    tolerance: float
    block_errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        lines = [f"gradient check (eps={self.epsilon:g}, tol={self.tolerance:g})"]
        for name, err in sorted(self.block_errors.items()):
            lines.append(f"  {name}: rel_err={err:.3e}")
        lines.append(f"  max: {self.max_rel_error:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def finite_diff_check(loss_fn, params, epsilon: float = 1e-5,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn``: nullary callable returning a scalar Tensor, pure in the
    parameter values. ``params``: iterable of (name, Parameter) pairs or
    Parameters; frozen parameters are excluded from the report.
    """
    named = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            named.append(p)
        else:
            named.append((p.name or f"param{i}", p))
    named = [(name, p) for name, p in named if isinstance(p, Parameter) and p.trainable]

    # analytic pass
    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("finite_diff_check: loss is not finite")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named
    }

    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    for name, p in named:
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():  # value-only evaluations
                flat[j] = orig + epsilon
                f_plus = float(loss_fn().data)
                flat[j] = orig - epsilon
                f_minus = float(loss_fn().data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"finite_diff_check: non-finite loss perturbing {name}")
            fd_flat[j] = (f_plus - f_minus) / (2.0 * epsilon)
        an = analytic[name]
        num = np.linalg.norm(fd - an)
        den = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        report.block_errors[name] = float(num / den)
    return report
