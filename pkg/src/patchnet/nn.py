"""The local patch classifier: 7 conv layers, per-filter reducers, sigmoid head.

Layer stack applied to one m' x n' x c patch:

    7 x [3x3 conv, 64 filters, zero padding 1, stride 1, ReLU]
    64 per-filter dot products reducing each filter map to a scalar, tanh
    dense 64 -> 1, sigmoid

Convolution is cross-correlation (kernels are not flipped).  Every patch is
evaluated independently with fixed-shape matrix products, so a patch's output
never depends on what else is in the batch -- batching, chunking and patch
order are all bit-neutral.  ReLU's subgradient at 0 is taken to be 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

N_FILTERS = 64
N_CONV_LAYERS = 7
KERNEL = 3
PAD = 1


@dataclass
class ConvLayer:
    weights: np.ndarray  # (64, in_channels, 3, 3)
    bias: np.ndarray     # (64,)


@dataclass
class ReducerBank:
    """64 independent linear maps, one per filter map, over row-major pixels."""
    weights: np.ndarray  # (64, m'*n')
    bias: np.ndarray     # (64,)


@dataclass
class HeadLayer:
    weights: np.ndarray  # (64,)
    bias: np.ndarray     # scalar, shape ()


@dataclass
class SubnetParams:
    conv_layers: list[ConvLayer]
    reducer: ReducerBank
    head: HeadLayer
    patch_dims: tuple[int, int, int]  # (m', n', c)


def param_arrays(params: SubnetParams) -> list[np.ndarray]:
    """All parameter tensors in canonical (checkpoint/optimizer) order."""
    out = []
    for layer in params.conv_layers:
        out += [layer.weights, layer.bias]
    out += [params.reducer.weights, params.reducer.bias,
            params.head.weights, params.head.bias]
    return out


def param_count(patch_dims) -> int:
    """Total learnable scalars as a pure function of (m', n', c)."""
    m, n, c = patch_dims
    count = 0
    cin = c
    for _ in range(N_CONV_LAYERS):
        count += N_FILTERS * cin * KERNEL * KERNEL + N_FILTERS
        cin = N_FILTERS
    count += N_FILTERS * m * n + N_FILTERS  # reducer
    count += N_FILTERS + 1                  # head
    return count


def check_params(params: SubnetParams) -> None:
    """Validate all shapes against patch_dims; raises ValueError on breach."""
    m, n, c = params.patch_dims
    if len(params.conv_layers) != N_CONV_LAYERS:
        raise ValueError(f"expected {N_CONV_LAYERS} conv layers, got {len(params.conv_layers)}")
    cin = c
    for i, layer in enumerate(params.conv_layers):
        want = (N_FILTERS, cin, KERNEL, KERNEL)
        if layer.weights.shape != want:
            raise ValueError(f"conv layer {i} weights {layer.weights.shape}, expected {want}")
        if layer.bias.shape != (N_FILTERS,):
            raise ValueError(f"conv layer {i} bias {layer.bias.shape}, expected ({N_FILTERS},)")
        cin = N_FILTERS
    if params.reducer.weights.shape != (N_FILTERS, m * n):
        raise ValueError(f"reducer weights {params.reducer.weights.shape}, expected {(N_FILTERS, m * n)}")
    if params.head.weights.shape != (N_FILTERS,):
        raise ValueError(f"head weights {params.head.weights.shape}, expected ({N_FILTERS},)")
    total = sum(a.size for a in param_arrays(params))
    if total != param_count(params.patch_dims):
        raise ValueError(f"parameter count {total} != expected {param_count(params.patch_dims)}")


def clone_params(params: SubnetParams) -> SubnetParams:
    return SubnetParams(
        conv_layers=[ConvLayer(l.weights.copy(), l.bias.copy()) for l in params.conv_layers],
        reducer=ReducerBank(params.reducer.weights.copy(), params.reducer.bias.copy()),
        head=HeadLayer(params.head.weights.copy(), params.head.bias.copy()),
        patch_dims=params.patch_dims,
    )


def params_astype(params: SubnetParams, dtype) -> SubnetParams:
    return SubnetParams(
        conv_layers=[ConvLayer(l.weights.astype(dtype), l.bias.astype(dtype))
                     for l in params.conv_layers],
        reducer=ReducerBank(params.reducer.weights.astype(dtype), params.reducer.bias.astype(dtype)),
        head=HeadLayer(params.head.weights.astype(dtype), params.head.bias.astype(dtype)),
        patch_dims=params.patch_dims,
    )


def zeros_like_params(params: SubnetParams) -> SubnetParams:
    return SubnetParams(
        conv_layers=[ConvLayer(np.zeros_like(l.weights), np.zeros_like(l.bias))
                     for l in params.conv_layers],
        reducer=ReducerBank(np.zeros_like(params.reducer.weights), np.zeros_like(params.reducer.bias)),
        head=HeadLayer(np.zeros_like(params.head.weights), np.zeros_like(params.head.bias)),
        patch_dims=params.patch_dims,
    )


def kaiming_init(rng: Rng, patch_dims, dtype=np.float32) -> SubnetParams:
    """Fresh parameters: conv weights ~ N(0, sqrt(2/fan_in)), all biases 0.

    Reducer and head weights use uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    Draw order is fixed (conv layers in depth order, then reducer, then head)
    so a given seed always produces bit-identical parameters.
    """
    m, n, c = patch_dims
    convs = []
    cin = c
    for _ in range(N_CONV_LAYERS):
        fan_in = cin * KERNEL * KERNEL
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (N_FILTERS, cin, KERNEL, KERNEL), dtype)
        convs.append(ConvLayer(w, np.zeros(N_FILTERS, dtype)))
        cin = N_FILTERS
    k = 1.0 / math.sqrt(m * n)
    reducer = ReducerBank(rng.uniform(-k, k, (N_FILTERS, m * n), dtype), np.zeros(N_FILTERS, dtype))
    k = 1.0 / math.sqrt(N_FILTERS)
    head = HeadLayer(rng.uniform(-k, k, (N_FILTERS,), dtype), np.zeros((), dtype))
    params = SubnetParams(convs, reducer, head, (m, n, c))
    check_params(params)
    return params


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    """Pointwise relu / tanh / sigmoid (sigmoid is overflow-safe)."""
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    raise ValueError(f"unknown activation {kind!r}")


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


# ---------------------------------------------------------------------------
# Fast kernels.  Activations live in channels-last (h, w, c) layout; a conv
# layer is 9 matrix products, one per kernel tap, accumulated in fixed order.
# ---------------------------------------------------------------------------

class _Frozen:
    """Channels-last weight snapshot reused across the patches of one batch."""

    def __init__(self, params: SubnetParams):
        m, n, _ = params.patch_dims
        self.convs = [
            (np.ascontiguousarray(l.weights.transpose(2, 3, 1, 0)), l.bias)  # (3,3,cin,64)
            for l in params.conv_layers
        ]
        self.rw_t = np.ascontiguousarray(params.reducer.weights.T)  # (m*n, 64)
        self.rb = params.reducer.bias
        self.hw = params.head.weights
        self.hb = float(params.head.bias)
        self.m, self.n = m, n


def _conv_taps_forward(xp: np.ndarray, wk: np.ndarray, bias: np.ndarray,
                       h: int, w: int) -> np.ndarray:
    """Padded input (h+2, w+2, cin) -> pre-activation (h*w, 64)."""
    z = np.empty((h * w, N_FILTERS), xp.dtype)
    z[:] = bias
    for a in range(KERNEL):
        for b in range(KERNEL):
            v = np.ascontiguousarray(xp[a:a + h, b:b + w]).reshape(h * w, -1)
            z += v @ wk[a, b]
    return z


def _pad(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    xp = np.zeros((h + PAD * 2, w + PAD * 2, c), x.dtype)
    xp[PAD:PAD + h, PAD:PAD + w] = x
    return xp


def _forward_single(x: np.ndarray, fz: _Frozen, keep_cache: bool):
    """One patch (h, w, c) channels-last -> (q, cache)."""
    h, w = fz.m, fz.n
    conv_cache = []
    a = x
    for wk, bias in fz.convs:
        xp = _pad(a)
        z = _conv_taps_forward(xp, wk, bias, h, w)
        if keep_cache:
            conv_cache.append((xp, z))
        a = np.maximum(z, 0).reshape(h, w, N_FILTERS)
    flat = a.reshape(h * w, N_FILTERS)
    r = (flat * fz.rw_t).sum(axis=0) + fz.rb
    t = np.tanh(r)
    logit = float(fz.hw @ t) + fz.hb
    q = _sigmoid_scalar(logit)
    cache = (conv_cache, flat, t, logit) if keep_cache else None
    return q, cache


def _backward_single(fz: _Frozen, cache, dq: float, grads: "_FrozenGrads") -> None:
    """Accumulate one patch's parameter gradients into channels-last buffers."""
    h, w = fz.m, fz.n
    conv_cache, flat, t, logit = cache
    q = _sigmoid_scalar(logit)
    dlogit = dq * q * (1.0 - q)
    grads.hw += dlogit * t
    grads.hb += dlogit
    dr = (dlogit * fz.hw) * (1.0 - t * t)
    grads.rw_t += flat * dr
    grads.rb += dr
    dflat = fz.rw_t * dr  # (h*w, 64)
    for li in range(N_CONV_LAYERS - 1, -1, -1):
        xp, z = conv_cache[li]
        wk, _ = fz.convs[li]
        dz = dflat * (z > 0)
        gwk, gb = grads.convs[li]
        gb += dz.sum(axis=0)
        for a in range(KERNEL):
            for b in range(KERNEL):
                v = np.ascontiguousarray(xp[a:a + h, b:b + w]).reshape(h * w, -1)
                gwk[a, b] += v.T @ dz
        if li == 0:
            break
        cin = wk.shape[2]
        dxp = np.zeros((h + 2, w + 2, cin), dz.dtype)
        for a in range(KERNEL):
            for b in range(KERNEL):
                dxp[a:a + h, b:b + w] += (dz @ wk[a, b].T).reshape(h, w, cin)
        dflat = dxp[1:1 + h, 1:1 + w].reshape(h * w, cin)


class _FrozenGrads:
    def __init__(self, fz: _Frozen, dtype):
        self.convs = [(np.zeros_like(wk), np.zeros(N_FILTERS, dtype)) for wk, _ in fz.convs]
        self.rw_t = np.zeros_like(fz.rw_t)
        self.rb = np.zeros(N_FILTERS, dtype)
        self.hw = np.zeros(N_FILTERS, dtype)
        self.hb = 0.0

    def to_params(self, patch_dims) -> SubnetParams:
        convs = [ConvLayer(np.ascontiguousarray(wk.transpose(3, 2, 0, 1)), gb)
                 for wk, gb in self.convs]
        reducer = ReducerBank(np.ascontiguousarray(self.rw_t.T), self.rb)
        head = HeadLayer(self.hw, np.asarray(self.hb, self.hw.dtype))
        return SubnetParams(convs, reducer, head, patch_dims)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def conv2d_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation plus bias on (b, cin, h, w) input."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected (b, cin, h, w) input, got shape {x.shape}")
    cin = layer.weights.shape[1]
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {cin}")
    b, _, h, w = x.shape
    wk = np.ascontiguousarray(layer.weights.transpose(2, 3, 1, 0)).astype(x.dtype, copy=False)
    bias = layer.bias.astype(x.dtype, copy=False)
    out = np.empty((b, N_FILTERS, h, w), x.dtype)
    for i in range(b):
        xp = _pad(np.ascontiguousarray(x[i].transpose(1, 2, 0)))
        z = _conv_taps_forward(xp, wk, bias, h, w)
        out[i] = z.reshape(h, w, N_FILTERS).transpose(2, 0, 1)
    return out


def _check_patches(params: SubnetParams, patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    m, n, c = params.patch_dims
    if patches.ndim != 4 or patches.shape[1:] != (c, m, n):
        raise ValueError(
            f"patch batch shape {patches.shape} does not match params patch dims (l, {c}, {m}, {n})")
    return patches


def subnet_forward(params: SubnetParams, patches: np.ndarray,
                   _cache_out: list | None = None) -> np.ndarray:
    """Per-patch class-1 probabilities, strictly inside (0, 1).

    patches: (l, c, m', n') with values already normalized to [0, 1].
    Each patch is processed independently; outputs are float64.
    """
    patches = _check_patches(params, patches)
    fz = _Frozen(params)
    dtype = params.conv_layers[0].weights.dtype
    keep = _cache_out is not None
    qs = np.empty(len(patches), np.float64)
    for j, p in enumerate(patches):
        x = np.ascontiguousarray(p.transpose(1, 2, 0)).astype(dtype, copy=False)
        q, cache = _forward_single(x, fz, keep)
        qs[j] = q
        if keep:
            _cache_out.append(cache)
    return qs


def subnet_backward(params: SubnetParams, patches: np.ndarray,
                    upstream_grads: np.ndarray,
                    cache: list | None = None) -> SubnetParams:
    """Analytic gradients w.r.t. every parameter, summed over the patch batch.

    upstream_grads[j] is dLoss/dq_j.  Returns a SubnetParams-shaped container
    of gradient tensors.  Patches are accumulated in batch order.
    """
    patches = _check_patches(params, patches)
    upstream_grads = np.asarray(upstream_grads, np.float64)
    if upstream_grads.shape != (len(patches),):
        raise ValueError(
            f"upstream grads shape {upstream_grads.shape} != (l,) = ({len(patches)},)")
    fz = _Frozen(params)
    dtype = params.conv_layers[0].weights.dtype
    if cache is None:
        cache = []
        subnet_forward(params, patches, _cache_out=cache)
    grads = _FrozenGrads(fz, dtype)
    for j in range(len(patches)):
        _backward_single(fz, cache[j], float(upstream_grads[j]), grads)
    return grads.to_params(params.patch_dims)


def grad_check(params: SubnetParams, rng: Rng, n_probes: int,
               epsilon: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs in float64 on a random patch with the full patch -> probability ->
    cross-entropy composition (label 1).  Probes whose +/-epsilon evaluations
    cross a ReLU kink (activation sign pattern changes) are re-sampled.
    Relative error is floored at a 1e-6 denominator so dead paths where both
    gradients vanish do not register finite-difference noise.
    """
    p64 = params_astype(params, np.float64)
    m, n, c = p64.patch_dims
    patch = rng.uniform(0.0, 1.0, (1, c, m, n), np.float64)

    def loss_and_masks(pp: SubnetParams):
        cache = []
        q = subnet_forward(pp, patch, _cache_out=cache)[0]
        qc = min(max(q, 1e-12), 1.0 - 1e-12)
        masks = [z > 0 for _, z in cache[0][0]]
        return -math.log(qc), masks

    base_q = subnet_forward(p64, patch)[0]
    base_qc = min(max(base_q, 1e-12), 1.0 - 1e-12)
    analytic = subnet_backward(p64, patch, np.array([-1.0 / base_qc]))
    arrays = param_arrays(p64)
    grad_arrays = param_arrays(analytic)

    worst = 0.0
    done = 0
    attempts = 0
    while done < n_probes:
        attempts += 1
        if attempts > 50 * n_probes:
            raise RuntimeError("grad_check could not find enough kink-free probes")
        ai = rng.randint(len(arrays))
        arr = arrays[ai]
        fi = rng.randint(arr.size)
        orig = arr.flat[fi]
        arr.flat[fi] = orig + epsilon
        lp, masks_p = loss_and_masks(p64)
        arr.flat[fi] = orig - epsilon
        lm, masks_m = loss_and_masks(p64)
        arr.flat[fi] = orig
        if any(not np.array_equal(mp, mm) for mp, mm in zip(masks_p, masks_m)):
            continue  # ReLU kink between the two evaluations; re-sample
        numeric = (lp - lm) / (2.0 * epsilon)
        a = float(grad_arrays[ai].flat[fi])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
        done += 1
    return worst
