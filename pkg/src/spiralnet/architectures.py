"""Declarative network descriptions and symbolic parameter counting.

A network is a set of convolutional branches, each reading one frequency
band of the 128 x 96 constant-Q input, whose flattened outputs are
concatenated and fed to a shared dense head (64 hidden units, 8 outputs).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable

from .tensor import DimensionError

N_FRAMES = 128
N_BINS = 96
BINS_PER_OCTAVE = 12
HIDDEN_UNITS = 64
N_CLASSES = 8
ALPHA = 0.3
DROPOUT = 0.5


@dataclass(frozen=True)
class BandCrop:
    lo: int
    hi: int

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= N_BINS:
            raise ValueError(f"invalid band crop [{self.lo}, {self.hi})")

    @property
    def height(self) -> int:
        return self.hi - self.lo


FULL_BAND = BandCrop(0, 96)  # A1 .. A9
SPIRAL_BAND = BandCrop(12, 60)  # A2 .. A6
HIGH_BAND = BandCrop(60, 96)  # A6 .. A9


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``geometry`` holds the kind-specific extents.

    kinds and their geometry keys:
      conv2d             dt, dk, channels
      conv1d_fullheight  dt, channels (kernel spans the whole input height)
      spiral             dt, dk, octaves, bins_per_octave, channels
      maxpool            pt, pk
      relu               alpha
      dropout            rate
      dense              units, bias
      flatten, concat, softmax
    """

    kind: str
    geometry: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.geometry[key]

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.geometry}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


KINDS = {"conv2d", "conv1d_fullheight", "spiral", "maxpool", "relu", "dropout", "dense", "flatten", "concat", "softmax"}


@dataclass(frozen=True)
class Branch:
    name: str
    crop: BandCrop
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    branches: tuple[Branch, ...]
    head: tuple[LayerSpec, ...]
    n_frames: int = N_FRAMES

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "n_frames": self.n_frames,
            "branches": [
                {"name": b.name, "crop": [b.crop.lo, b.crop.hi], "layers": [l.to_json() for l in b.layers]}
                for b in self.branches
            ],
            "head": [l.to_json() for l in self.head],
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        branches = tuple(
            Branch(b["name"], BandCrop(*b["crop"]), tuple(LayerSpec.from_json(l) for l in b["layers"]))
            for b in d["branches"]
        )
        return cls(d["name"], branches, tuple(LayerSpec.from_json(l) for l in d["head"]), d.get("n_frames", N_FRAMES))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def standard_head(alpha: float = ALPHA, rate: float = DROPOUT) -> tuple[LayerSpec, ...]:
    return (
        LayerSpec("concat"),
        LayerSpec("dropout", {"rate": rate}),
        LayerSpec("dense", {"units": HIDDEN_UNITS, "bias": True}),
        LayerSpec("relu", {"alpha": alpha}),
        LayerSpec("dropout", {"rate": rate}),
        LayerSpec("dense", {"units": N_CLASSES, "bias": False}),
        LayerSpec("softmax"),
    )


def _conv_block(first: LayerSpec, n_kernels: int, alpha: float) -> tuple[LayerSpec, ...]:
    return (
        first,
        LayerSpec("relu", {"alpha": alpha}),
        LayerSpec("maxpool", {"pt": 5, "pk": 3}),
        LayerSpec("conv2d", {"dt": 5, "dk": 5, "channels": n_kernels}),
        LayerSpec("relu", {"alpha": alpha}),
        LayerSpec("maxpool", {"pt": 5, "pk": 3}),
        LayerSpec("flatten"),
    )


def branch_2d(n_kernels: int = 32, alpha: float = ALPHA) -> Branch:
    first = LayerSpec("conv2d", {"dt": 5, "dk": 5, "channels": n_kernels})
    return Branch("2d", FULL_BAND, _conv_block(first, n_kernels, alpha))


def branch_1d(n_kernels: int = 32, alpha: float = ALPHA) -> Branch:
    layers = (
        LayerSpec("conv1d_fullheight", {"dt": 3, "channels": n_kernels}),
        LayerSpec("relu", {"alpha": alpha}),
        LayerSpec("maxpool", {"pt": 5, "pk": 1}),
        LayerSpec("conv2d", {"dt": 3, "dk": 1, "channels": n_kernels}),
        LayerSpec("relu", {"alpha": alpha}),
        LayerSpec("maxpool", {"pt": 5, "pk": 1}),
        LayerSpec("flatten"),
    )
    return Branch("1d", HIGH_BAND, layers)


def branch_spiral(n_kernels: int = 32, alpha: float = ALPHA) -> Branch:
    first = LayerSpec(
        "spiral", {"dt": 5, "dk": 3, "octaves": 3, "bins_per_octave": BINS_PER_OCTAVE, "channels": n_kernels}
    )
    return Branch("spiral", SPIRAL_BAND, _conv_block(first, n_kernels, alpha))


_BRANCHES = {"2d": branch_2d, "1d": branch_1d, "spiral": branch_spiral}
# canonical branch order inside hybrids
_ORDER = ("2d", "1d", "spiral")


def build_2d(n_kernels: int = 32) -> NetworkSpec:
    if n_kernels not in (32, 48):
        raise ValueError("the 2-d network is defined for 32 or 48 kernels")
    return NetworkSpec(f"2d{n_kernels}", (branch_2d(n_kernels),), standard_head())


def build_1d() -> NetworkSpec:
    return NetworkSpec("1d", (branch_1d(),), standard_head())


def build_spiral() -> NetworkSpec:
    return NetworkSpec("spiral", (branch_spiral(),), standard_head())


def build_hybrid(strategies: Iterable[str]) -> NetworkSpec:
    chosen = set(strategies)
    if not chosen:
        raise ValueError("a hybrid needs at least one strategy")
    unknown = chosen - set(_BRANCHES)
    if unknown:
        raise ValueError(f"unknown strategies: {sorted(unknown)}")
    names = [s for s in _ORDER if s in chosen]
    if names == ["2d"]:
        return build_2d(32)
    if len(names) == 1:
        return {"1d": build_1d, "spiral": build_spiral}[names[0]]()
    return NetworkSpec("+".join(names), tuple(_BRANCHES[s]() for s in names), standard_head())


# command-line names, one per results-table row
ARCHITECTURES = {
    "2d32": lambda: build_2d(32),
    "2d48": lambda: build_2d(48),
    "1d": build_1d,
    "spiral": build_spiral,
    "spiral+1d": lambda: build_hybrid({"spiral", "1d"}),
    "spiral+2d": lambda: build_hybrid({"spiral", "2d"}),
    "1d+2d": lambda: build_hybrid({"1d", "2d"}),
    "all": lambda: build_hybrid({"2d", "1d", "spiral"}),
}


def get_architecture(name: str) -> NetworkSpec:
    try:
        return ARCHITECTURES[name]()
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}") from None


@dataclass
class LayerInfo:
    where: str
    index: int
    kind: str
    out_shape: tuple
    params: dict[str, tuple]

    @property
    def n_params(self) -> int:
        n = 0
        for shape in self.params.values():
            size = 1
            for s in shape:
                size *= s
            n += size
        return n


def _branch_layers(branch: Branch, n_frames: int) -> tuple[list[LayerInfo], int]:
    shape: tuple = (n_frames, branch.crop.height, 1)
    infos = []
    for i, layer in enumerate(branch.layers):
        if layer.kind not in KINDS:
            raise DimensionError(f"{branch.name} layer {i}: unknown kind {layer.kind!r}")
        params: dict[str, tuple] = {}
        t, k, c = shape if len(shape) == 3 else (None, None, None)
        if layer.kind in ("conv2d", "conv1d_fullheight", "spiral"):
            if len(shape) != 3:
                raise DimensionError(f"{branch.name} layer {i}: convolution after flatten")
            dt = layer["dt"]
            dk = k if layer.kind == "conv1d_fullheight" else layer["dk"]
            cout = layer["channels"]
            if layer.kind == "spiral":
                q, j = layer["bins_per_octave"], layer["octaves"]
                ko = k - q * (j - 1) - (dk - 1)
                params["weight"] = (dt, dk, j, c, cout)
            else:
                ko = k - dk + 1
                params["weight"] = (dt, dk, c, cout)
            params["bias"] = (cout,)
            to = t - dt + 1
            if to < 1 or ko < 1 or dt < 1 or dk < 1 or cout < 1:
                raise DimensionError(f"{branch.name} layer {i}: kernel does not fit input {shape}")
            shape = (to, ko, cout)
        elif layer.kind == "maxpool":
            pt, pk = layer["pt"], layer["pk"]
            if len(shape) != 3 or pt > t or pk > k or pt < 1 or pk < 1:
                raise DimensionError(f"{branch.name} layer {i}: pool {pt}x{pk} does not fit input {shape}")
            shape = (t // pt, k // pk, c)
        elif layer.kind == "flatten":
            size = 1
            for s in shape:
                size *= s
            shape = (size,)
        elif layer.kind in ("relu", "dropout"):
            pass
        else:
            raise DimensionError(f"{branch.name} layer {i}: {layer.kind} not allowed inside a branch")
        infos.append(LayerInfo(branch.name, i, layer.kind, shape, params))
    if not branch.layers or branch.layers[-1].kind != "flatten":
        raise DimensionError(f"{branch.name}: branch must end with flatten")
    return infos, shape[0]


def layer_table(spec: NetworkSpec) -> list[LayerInfo]:
    """Per-layer output shapes and parameter shapes, computed without allocation."""
    infos: list[LayerInfo] = []
    width = 0
    for branch in spec.branches:
        b_infos, n = _branch_layers(branch, spec.n_frames)
        infos.extend(b_infos)
        width += n
    shape: tuple = (width,)
    for i, layer in enumerate(spec.head):
        params: dict[str, tuple] = {}
        if layer.kind == "dense":
            units = layer["units"]
            if units < 1:
                raise DimensionError(f"head layer {i}: dense needs positive units")
            params["weight"] = (shape[0], units)
            if layer["bias"]:
                params["bias"] = (units,)
            shape = (units,)
        elif layer.kind not in ("concat", "relu", "dropout", "softmax"):
            raise DimensionError(f"head layer {i}: {layer.kind} not allowed in the head")
        infos.append(LayerInfo("head", i, layer.kind, shape, params))
    return infos


def count_params(spec: NetworkSpec) -> int:
    return sum(info.n_params for info in layer_table(spec))


def param_shapes(spec: NetworkSpec) -> dict[str, tuple]:
    """Ordered mapping ``"<branch>.<index>.<name>" -> shape`` in declaration order."""
    out: dict[str, tuple] = {}
    for info in layer_table(spec):
        for pname, shape in info.params.items():
            out[f"{info.where}.{info.index}.{pname}"] = shape
    return out


def describe(spec: NetworkSpec) -> list[dict[str, Any]]:
    rows = []
    for info in layer_table(spec):
        rows.append(
            {"branch": info.where, "index": info.index, "kind": info.kind,
             "output": "x".join(map(str, info.out_shape)), "params": info.n_params}
        )
    return rows
