"""Runtime networks built from a :class:`NetworkSpec`, plus Adam and checkpoints."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .architectures import NetworkSpec, param_shapes


class StateError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases."""
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            field = int(np.prod(shape[:-2]))
            fan_in, fan_out = field * shape[-2], field * shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def zero_params(spec: NetworkSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(spec).items()}


def execution_order(layers) -> list[int]:
    """Layer indices in evaluation order.

    A leaky rectifier with positive slope is increasing, so it commutes with
    the max-pool that follows it; running it after the pool touches far fewer
    elements and yields the same values.
    """
    order = list(range(len(layers)))
    i = 0
    while i < len(order) - 1:
        a, b = layers[order[i]], layers[order[i + 1]]
        if a.kind == "relu" and a["alpha"] > 0 and b.kind == "maxpool":
            order[i], order[i + 1] = order[i + 1], order[i]
            i += 2
        else:
            i += 1
    return order


class Network:
    """Feed-forward evaluation of a spec with a single-pass reverse sweep.

    ``forward`` records what ``backward`` needs; ``backward`` consumes the
    record and returns gradients keyed like ``params``.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray]):
        expected = param_shapes(spec)
        missing = set(expected) - set(params)
        if missing:
            raise T.DimensionError(f"missing parameters: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise T.DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.spec = spec
        self.params = params
        self._tape: list | None = None

    def _p(self, where, index, name):
        return self.params[f"{where}.{index}.{name}"]

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None, need_input_grad=False):
        """Class probabilities for a batch ``(N, T, K)`` or a single ``(T, K)`` spectrogram."""
        x = np.asarray(x)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.spec.n_frames:
            raise T.DimensionError(f"expected (N, {self.spec.n_frames}, K) input, got {x.shape}")
        tape: list = []
        feats = []
        for b in self.spec.branches:
            if x.shape[2] < b.crop.hi:
                raise T.DimensionError(f"input height {x.shape[2]} smaller than crop end {b.crop.hi}")
            h = x[:, :, b.crop.lo : b.crop.hi, None]
            for i in execution_order(b.layers):
                h = self._layer_forward(b.name, i, b.layers[i], h, tape, training, rng, first=(i == 0) and not need_input_grad)
            feats.append(h)
        sizes = [f.shape[1] for f in feats]
        h = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
        for i, layer in enumerate(self.spec.head):
            if layer.kind == "concat":
                tape.append(("head", i, "concat", sizes))
                continue
            h = self._layer_forward("head", i, layer, h, tape, training, rng)
        if not np.isfinite(h).all():
            raise T.NonFiniteError("network output is not finite")
        self._tape = tape
        self._input_shape = x.shape
        return h[0] if single else h

    def _layer_forward(self, where, i, layer, h, tape, training, rng, first=False):
        kind = layer.kind
        if kind == "conv2d" or kind == "conv1d_fullheight":
            w, b = self._p(where, i, "weight"), self._p(where, i, "bias")
            y, cols = T.conv2d_valid(h, w, b, return_cols=True)
            tape.append((where, i, "conv", h, not first, cols))
            return y
        if kind == "spiral":
            w, b = self._p(where, i, "weight"), self._p(where, i, "bias")
            q = layer["bins_per_octave"]
            y, cols = T.spiral_conv(h, w, b, q, return_cols=True)
            tape.append((where, i, "spiral", h, not first, q, cols))
            return y
        if kind == "relu":
            tape.append((where, i, "relu", h, layer["alpha"]))
            return T.relu_leaky(h, layer["alpha"])
        if kind == "maxpool":
            tape.append((where, i, "maxpool", h, layer["pt"], layer["pk"]))
            return T.maxpool(h, layer["pt"], layer["pk"])
        if kind == "flatten":
            tape.append((where, i, "flatten", h.shape))
            return h.reshape(h.shape[0], -1)
        if kind == "dropout":
            y, mask = T.dropout(h, layer["rate"], training, rng)
            tape.append((where, i, "dropout", mask))
            return y
        if kind == "dense":
            w = self._p(where, i, "weight")
            y = h @ w
            if layer["bias"]:
                y = y + self._p(where, i, "bias")
            tape.append((where, i, "dense", h))
            return y
        if kind == "softmax":
            p = T.softmax(h, axis=1)
            tape.append((where, i, "softmax", p))
            return p
        raise ValueError(f"unsupported layer kind {kind!r}")

    def backward(self, labels, scale: float | None = None) -> dict[str, np.ndarray]:
        """Gradients of the mean cross-entropy over the batch of the last forward pass.

        The softmax and the loss are differentiated jointly
        (``probs - onehot``). ``scale`` overrides the ``1 / N`` batch mean.
        """
        if self._tape is None:
            raise StateError("backward called before forward")
        tape, self._tape = self._tape, None
        labels = np.atleast_1d(np.asarray(labels))
        where, i, kind, probs = tape.pop()
        if kind != "softmax":
            raise StateError("network does not end with softmax")
        n = probs.shape[0]
        g = T.softmax_cross_entropy_backward(probs, labels) * (1.0 / n if scale is None else scale)
        return self._sweep(tape, g)

    def backward_from_logits(self, dlogits) -> dict[str, np.ndarray]:
        """Reverse sweep seeded with an arbitrary gradient at the pre-softmax logits."""
        if self._tape is None:
            raise StateError("backward called before forward")
        tape, self._tape = self._tape, None
        tape.pop()
        return self._sweep(tape, np.asarray(dlogits))

    def _sweep(self, tape, g):
        grads: dict[str, np.ndarray] = {}
        pending: dict[str, np.ndarray] = {}
        crops = {b.name: b.crop for b in self.spec.branches}
        self.input_grad = None
        while tape:
            rec = tape.pop()
            where, i, kind = rec[:3]
            if kind == "concat":
                splits = np.cumsum(rec[3])[:-1]
                for b, gb in zip(self.spec.branches, np.split(g, splits, axis=1)):
                    pending[b.name] = gb
                continue
            if where in pending:
                g = pending.pop(where)
            g = self._layer_backward(where, i, kind, rec, g, grads)
            if i == 0 and where != "head" and g is not None:
                if self.input_grad is None:
                    self.input_grad = np.zeros(self._input_shape, dtype=g.dtype)
                crop = crops[where]
                self.input_grad[:, :, crop.lo : crop.hi] += g[..., 0]
        return grads

    def _layer_backward(self, where, i, kind, rec, g, grads):
        if kind == "dense":
            h = rec[3]
            w = self._p(where, i, "weight")
            grads[f"{where}.{i}.weight"] = h.T @ g
            if f"{where}.{i}.bias" in self.params:
                grads[f"{where}.{i}.bias"] = g.sum(axis=0)
            return g @ w.T
        if kind == "dropout":
            mask = rec[3]
            return g if mask is None else g * mask
        if kind == "relu":
            return T.relu_leaky_backward(g, rec[3], rec[4])
        if kind == "flatten":
            return g.reshape(rec[3])
        if kind == "maxpool":
            return T.maxpool_backward(g, rec[3], rec[4], rec[5])
        if kind == "conv":
            h, need_dx, cols = rec[3], rec[4], rec[5]
            dw, db, dx = T.conv2d_valid_backward(g, h, self._p(where, i, "weight"), need_dx, cols)
            grads[f"{where}.{i}.weight"] = dw
            grads[f"{where}.{i}.bias"] = db
            return dx
        if kind == "spiral":
            h, need_dx, q, cols = rec[3], rec[4], rec[5], rec[6]
            dw, db, dx = T.spiral_conv_backward(g, h, self._p(where, i, "weight"), q, need_dx, cols)
            grads[f"{where}.{i}.weight"] = dw
            grads[f"{where}.{i}.bias"] = db
            return dx
        raise ValueError(f"no backward rule for {kind!r}")


def forward(spec: NetworkSpec, params: dict[str, np.ndarray], spectrogram) -> np.ndarray:
    """Inference-mode class probabilities for one spectrogram or a batch."""
    return Network(spec, params).forward(spectrogram, training=False)


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise T.DimensionError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


# checkpoint container: magic, u64 header length, JSON header, raw <f4 blocks
MAGIC = b"SPNCKPT1"


def save_checkpoint(path, spec: NetworkSpec, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in param_shapes(spec):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = {"architecture": spec.to_json(), "params": entries, "dtype": "<f4"}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[NetworkSpec, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    spec = NetworkSpec.from_json(header["architecture"])
    params = {}
    for e in header["params"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ValueError(f"{path}: truncated parameter block {e['name']} at byte {start}")
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return spec, params, header.get("extra", {})
