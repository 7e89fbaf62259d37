"""Central finite-difference oracle for reverse-mode gradients."""

from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, OracleError
from .tensor import Tensor, no_grad


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, step: float) -> np.ndarray:
    """Central differences of ``f`` with respect to every coordinate of ``param``."""
    base = param.data
    out = np.empty(base.shape, dtype=np.float64)
    flat_out = out.reshape(-1)
    try:
        for i in range(base.size):
            plus = base.copy()
            plus.reshape(-1)[i] += step
            param.data = plus
            with no_grad():
                fp = float(f().data)
            minus = base.copy()
            minus.reshape(-1)[i] -= step
            param.data = minus
            with no_grad():
                fm = float(f().data)
            flat_out[i] = (fp - fm) / (2.0 * step)
    finally:
        param.data = base
    return out


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> float:
    """Compare ``backward`` against central differences; return the worst relative error.

    ``f`` takes no arguments and closes over ``params``.  Every parameter must
    hold 64-bit data.  The per-coordinate error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = _prepare(params)
    with no_grad():
        first = f().data.copy()
        second = f().data.copy()
    if first.tobytes() != second.tobytes():
        raise OracleError("objective is not deterministic: two evaluations at the same point differ")

    loss = f()
    if loss.data.tobytes() != first.tobytes():
        raise OracleError("objective differs between recorded and unrecorded evaluation")
    loss.backward()

    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numeric_gradient(f, p, step)
        if p.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def _prepare(params):
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"finite_diff_check needs float64 parameters, got {p.dtype}")
        p.requires_grad = True
        p.grad = None
    return params


def _replica_losses(f_batched, param, base_flat, shape, idx, deltas):
    """Evaluate ``f_batched`` once with one replica per (coordinate, delta) pair."""
    k, d = idx.size, len(deltas)
    stack = np.repeat(base_flat[None], k * d, axis=0)
    for j, delta in enumerate(deltas):
        stack[j::d][np.arange(k), idx] += delta
    param.data = stack.reshape((k * d,) + shape)
    with no_grad():
        losses = np.asarray(f_batched().data, dtype=np.float64).reshape(-1)
    if losses.size == 1:
        losses = np.repeat(losses, k * d)
    if losses.size != k * d:
        raise ContractError(f"batched objective returned {losses.size} losses for {k * d} replicas")
    return losses.reshape(k, d)


def numeric_gradient_batched(
    f_batched: Callable[[], Tensor],
    param: Tensor,
    step: float,
    chunk: int = 32,
    widen_noisy: bool = False,
    base_loss: Optional[float] = None,
):
    """Central differences evaluated ``chunk`` coordinates at a time.

    ``param.data`` is temporarily replaced by a stack of perturbed copies
    along a new leading axis.  ``f_batched()`` must treat that axis as
    independent replicas and return one loss per replica, or a single loss
    when the parameter does not influence the objective.

    With ``widen_noisy`` a coordinate whose estimate is small enough to be
    dominated by floating-point round-off of the loss is re-estimated with a
    step ``WIDEN_FACTOR`` times larger.  The choice depends only on the
    numeric estimate and the loss value.
    """
    base = param.data
    flat_base = base.reshape(-1)
    out = np.empty(base.size, dtype=np.float64)
    if widen_noisy and base_loss is None:
        with no_grad():
            base_loss = float(np.asarray(f_batched().data).reshape(-1)[0])
    try:
        for start in range(0, base.size, chunk):
            idx = np.arange(start, min(start + chunk, base.size))
            fpm = _replica_losses(f_batched, param, flat_base, base.shape, idx, (step, -step))
            out[idx] = (fpm[:, 0] - fpm[:, 1]) / (2.0 * step)
            if widen_noisy:
                _widen_noisy(f_batched, param, flat_base, base.shape, idx, base_loss, step, out)
    finally:
        param.data = base
    return out.reshape(base.shape)


NOISE_MARGIN = 1e3
WIDEN_FACTOR = 5.0


def _widen_noisy(f_batched, param, flat_base, shape, idx, f0, h, out):
    # round-off in f is about eps*|f|, so a central slope carries ~eps*|f|/h of noise
    band = NOISE_MARGIN * np.finfo(np.float64).eps * max(abs(f0), 1.0) / h
    # an exact zero means both perturbed losses are bit-identical: the
    # coordinate does not reach the loss and a wider step would not help
    est = np.abs(out[idx])
    noisy = (est < band) & (est > 0)
    if not noisy.any():
        return
    sel = idx[noisy]
    wide = WIDEN_FACTOR * h
    fpm = _replica_losses(f_batched, param, flat_base, shape, sel, (wide, -wide))
    out[sel] = (fpm[:, 0] - fpm[:, 1]) / (2.0 * wide)


def finite_diff_check_batched(
    f_batched: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    chunk: int = 32,
    per_param: Optional[List[float]] = None,
    widen_noisy: bool = False,
) -> float:
    """Same contract as :func:`finite_diff_check` for objectives that broadcast over parameter replicas.

    With unperturbed parameters ``f_batched()`` returns a single loss, which is
    differentiated by ``backward``; the numeric side is
    :func:`numeric_gradient_batched`.
    """
    params = _prepare(params)
    with no_grad():
        first = f_batched().data.copy()
        second = f_batched().data.copy()
    if first.tobytes() != second.tobytes():
        raise OracleError("objective is not deterministic: two evaluations at the same point differ")
    loss = f_batched()
    if loss.size != 1:
        raise ContractError(f"objective must return a single loss at the base point, got shape {loss.shape}")
    loss.reshape(()).backward()
    f0 = float(first.reshape(-1)[0])

    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numeric_gradient_batched(f_batched, p, step, chunk, widen_noisy, f0)
        err = float(relative_error(analytic, numeric).max()) if p.size else 0.0
        if per_param is not None:
            per_param.append(err)
        worst = max(worst, err)
    return worst
