"""Differentiable dense-grid primitives with analytic backward passes.

All tensors are float64 numpy arrays in channels-first layout: ``(C, H, W)``
in 2D, ``(C, D, H, W)`` in 3D.  Every op caches what its backward pass needs
at forward time; ``backward`` validates the upstream shape against the cached
forward output and returns one gradient per forward input, in order.

The ops are deliberately restricted to what the network needs: stride-1 odd
convolutions plus factor-2 pooling/upsampling keep every backward pass exact
and simple.
"""

from __future__ import annotations

from itertools import product

import numpy as np


class ShapeError(ValueError):
    """Input shapes incompatible with an op's contract."""


class BackwardBeforeForwardError(RuntimeError):
    """backward() called on an op that has no cached forward pass."""


class DiffOp:
    """Base class: forward(*inputs) -> output, backward(upstream) -> grads."""

    def __init__(self) -> None:
        self._cache: dict | None = None

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, ...]:
        raise NotImplementedError

    def _require_cache(self, upstream: np.ndarray) -> dict:
        if self._cache is None:
            raise BackwardBeforeForwardError(f"{type(self).__name__}.backward before forward")
        out_shape = self._cache["out_shape"]
        if upstream.shape != out_shape:
            raise ShapeError(
                f"{type(self).__name__}: upstream shape {upstream.shape} != forward output {out_shape}"
            )
        return self._cache


def _as_f64(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Conv(DiffOp):
    """Cross-correlation with zero padding.

    Kernel shape is ``(out_c, in_c, *k_spatial)`` with odd spatial dims; works
    for 2 or 3 spatial dimensions.
    """

    def __init__(self, stride: int = 1, padding: int = 0) -> None:
        super().__init__()
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise ValueError(f"padding must be >= 0, got {padding}")
        self.stride = stride
        self.padding = padding

    def forward(self, x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
        x, kernel, bias = _as_f64(x), _as_f64(kernel), _as_f64(bias)
        d = kernel.ndim - 2
        if d not in (2, 3):
            raise ShapeError(f"kernel must have 2 or 3 spatial dims, got shape {kernel.shape}")
        if x.ndim != d + 1:
            raise ShapeError(f"input shape {x.shape} does not match kernel spatial rank {d}")
        out_c, in_c = kernel.shape[:2]
        if x.shape[0] != in_c:
            raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {in_c}")
        if any(k % 2 == 0 for k in kernel.shape[2:]):
            raise ShapeError(f"kernel spatial dims must be odd, got {kernel.shape[2:]}")
        if bias.shape != (out_c,):
            raise ShapeError(f"bias shape {bias.shape} != ({out_c},)")

        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0),) + ((p, p),) * d)
        ksp = kernel.shape[2:]
        out_sp = tuple((x.shape[1 + i] + 2 * p - ksp[i]) // s + 1 for i in range(d))
        if any(n < 1 for n in out_sp):
            raise ShapeError(f"kernel {ksp} larger than padded input {xp.shape[1:]}")

        out = np.empty((out_c,) + out_sp)
        out[:] = bias.reshape((out_c,) + (1,) * d)
        for off in product(*(range(k) for k in ksp)):
            sl = (slice(None),) + tuple(
                slice(off[i], off[i] + s * out_sp[i], s) for i in range(d)
            )
            k_off = kernel[(slice(None), slice(None)) + off]  # (out_c, in_c)
            out += np.tensordot(k_off, xp[sl], axes=([1], [0]))
        self._cache = {"xp": xp, "x_shape": x.shape, "kernel": kernel,
                       "out_shape": out.shape, "d": d}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self._require_cache(upstream)
        xp, kernel, d = c["xp"], c["kernel"], c["d"]
        s, p = self.stride, self.padding
        out_sp = c["out_shape"][1:]
        sp_axes = tuple(range(1, 1 + d))

        grad_bias = upstream.sum(axis=sp_axes)
        grad_kernel = np.empty_like(kernel)
        grad_xp = np.zeros_like(xp)
        for off in product(*(range(k) for k in kernel.shape[2:])):
            sl = (slice(None),) + tuple(
                slice(off[i], off[i] + s * out_sp[i], s) for i in range(d)
            )
            patch = xp[sl]
            grad_kernel[(slice(None), slice(None)) + off] = np.tensordot(
                upstream, patch, axes=(sp_axes, sp_axes)
            )
            k_off = kernel[(slice(None), slice(None)) + off]
            grad_xp[sl] += np.tensordot(k_off.T, upstream, axes=([1], [0]))
        if p > 0:
            crop = (slice(None),) + (slice(p, -p),) * d
            grad_x = grad_xp[crop]
        else:
            grad_x = grad_xp
        return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


class ReLU(DiffOp):
    """Elementwise max(x, 0); subgradient at 0 taken as 0."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        out = np.maximum(x, 0.0)
        self._cache = {"mask": x > 0.0, "out_shape": out.shape}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray]:
        c = self._require_cache(upstream)
        return (upstream * c["mask"],)


class AvgPool2(DiffOp):
    """Factor-2 average pooling over every spatial axis."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        d = x.ndim - 1
        if d not in (2, 3):
            raise ShapeError(f"expected channels-first 2D/3D tensor, got shape {x.shape}")
        if any(n % 2 != 0 for n in x.shape[1:]):
            raise ShapeError(f"spatial dims must be even for factor-2 pooling, got {x.shape[1:]}")
        shaped = x.reshape(
            (x.shape[0],) + sum(((n // 2, 2) for n in x.shape[1:]), ())
        )
        out = shaped.mean(axis=tuple(range(2, 2 + 2 * d, 2)))
        self._cache = {"in_shape": x.shape, "d": d, "out_shape": out.shape}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray]:
        c = self._require_cache(upstream)
        d = c["d"]
        g = upstream / (2.0**d)
        for axis in range(1, 1 + d):
            g = np.repeat(g, 2, axis=axis)
        return (g,)


class NearestUpsample2(DiffOp):
    """Factor-2 nearest-neighbor upsampling over every spatial axis."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        d = x.ndim - 1
        if d not in (2, 3):
            raise ShapeError(f"expected channels-first 2D/3D tensor, got shape {x.shape}")
        out = x
        for axis in range(1, 1 + d):
            out = np.repeat(out, 2, axis=axis)
        self._cache = {"d": d, "out_shape": out.shape}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray]:
        c = self._require_cache(upstream)
        d = c["d"]
        g = upstream
        shaped = g.reshape((g.shape[0],) + sum(((n // 2, 2) for n in g.shape[1:]), ()))
        return (shaped.sum(axis=tuple(range(2, 2 + 2 * d, 2))),)


class Linear(DiffOp):
    """Affine map on a flat vector: y = W x + b."""

    def forward(self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
        x, weight, bias = _as_f64(x), _as_f64(weight), _as_f64(bias)
        if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
            raise ShapeError(f"linear: x {x.shape} vs weight {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = weight @ x + bias
        self._cache = {"x": x, "weight": weight, "out_shape": out.shape}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self._require_cache(upstream)
        return c["weight"].T @ upstream, np.outer(upstream, c["x"]), upstream.copy()


class ConcatChannels(DiffOp):
    """Concatenate tensors along the channel axis; spatial shapes must agree."""

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        if not xs:
            raise ShapeError("concat needs at least one input")
        xs = tuple(_as_f64(x) for x in xs)
        sp = xs[0].shape[1:]
        for x in xs[1:]:
            if x.shape[1:] != sp:
                raise ShapeError(f"concat spatial mismatch: {x.shape[1:]} vs {sp}")
        out = np.concatenate(xs, axis=0)
        self._cache = {"channels": [x.shape[0] for x in xs], "out_shape": out.shape}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray, ...]:
        c = self._require_cache(upstream)
        splits = np.cumsum(c["channels"])[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(upstream, splits, axis=0))


class Flatten(DiffOp):
    """Reshape a channels-first tensor to a flat vector."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        self._cache = {"in_shape": x.shape, "out_shape": (x.size,)}
        return x.reshape(-1).copy()

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray]:
        c = self._require_cache(upstream)
        return (upstream.reshape(c["in_shape"]).copy(),)


class GlobalAvgPool(DiffOp):
    """Mean over all spatial locations, one value per channel."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        if x.ndim < 2:
            raise ShapeError(f"expected channels-first tensor, got shape {x.shape}")
        out = x.mean(axis=tuple(range(1, x.ndim)))
        self._cache = {"in_shape": x.shape, "out_shape": out.shape}
        return out

    def backward(self, upstream: np.ndarray) -> tuple[np.ndarray]:
        c = self._require_cache(upstream)
        in_shape = c["in_shape"]
        nvox = int(np.prod(in_shape[1:]))
        g = np.broadcast_to(
            upstream.reshape((in_shape[0],) + (1,) * (len(in_shape) - 1)), in_shape
        )
        return (g / nvox,)


def softmax_cross_entropy(
    logits: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross entropy of softmax(logits) against integer labels.

    Returns (loss, grad_logits); grad is (softmax - onehot) / n_pixels, the
    gradient of the returned scalar.
    """
    logits = _as_f64(logits)
    target = np.asarray(target)
    k = logits.shape[0]
    if target.shape != logits.shape[1:]:
        raise ShapeError(f"target shape {target.shape} != logits spatial {logits.shape[1:]}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ShapeError(f"target must be an integer grid, got dtype {target.dtype}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"labels must be in [0, {k}), got range [{target.min()}, {target.max()}]")

    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=0, keepdims=True)
    n = target.size
    onehot_probs = np.take_along_axis(probs, target[None], axis=0)[0]
    loss = float(-np.log(onehot_probs).mean())
    grad = probs.copy()
    np.put_along_axis(grad, target[None], onehot_probs - 1.0, axis=0)
    return loss, grad / n


def check_gradient(
    op: DiffOp,
    inputs: list[np.ndarray],
    h: float = 1e-5,
    arg_index: int = 0,
    seed: int = 0,
    max_coords: int = 256,
) -> float:
    """Compare op's analytic gradient against central finite differences.

    The scalar under test is <u, op.forward(*inputs)> with a fixed random u.
    The gradient with respect to ``inputs[arg_index]`` is checked coordinate
    by coordinate; tensors larger than ``max_coords`` entries are subsampled
    by a seeded generator.  Returns the max relative error, with relative
    defined against max(|analytic|, |numeric|, 1).
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    rng = np.random.default_rng(seed)
    out = op.forward(*inputs)
    upstream = rng.standard_normal(out.shape)
    analytic = op.backward(upstream)[arg_index]

    x = inputs[arg_index]
    flat = x.reshape(-1)
    n = flat.size
    coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)

    def scalar_at(perturbed: np.ndarray) -> float:
        args = list(inputs)
        args[arg_index] = perturbed.reshape(x.shape)
        probe = type(op)(**_op_ctor_kwargs(op))
        return float(np.sum(upstream * probe.forward(*args)))

    max_err = 0.0
    an_flat = analytic.reshape(-1)
    for i in coords:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        numeric = (scalar_at(plus) - scalar_at(minus)) / (2 * h)
        denom = max(abs(an_flat[i]), abs(numeric), 1.0)
        max_err = max(max_err, abs(an_flat[i] - numeric) / denom)
    return max_err


def _op_ctor_kwargs(op: DiffOp) -> dict:
    if isinstance(op, Conv):
        return {"stride": op.stride, "padding": op.padding}
    return {}
