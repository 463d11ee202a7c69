"""Layer graphs: shape propagation, split points, model files and builtin models."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from slicekit import tensor as tc
from slicekit.errors import InvalidSplit, MissingWeights, ParseError, ShapeError, UnknownSpec
from slicekit.tensor import (Block, Conv2D, Dense, DeviceTL, EdgeTL, Flatten,
                             GlobalAvgPool, MaxPool, ReLU, Tensor)
from slicekit.wire import frame_size, model_id_for

FULL_OFFLOAD = -1

WEIGHTS_MAGIC = b"SLKW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True, eq=False)
class LayerGraph:
    """Ordered top-level units; unit ``i`` has id ``i``.

    ``params[i]`` is ``(weight, bias)`` for Conv2D/Dense, a tuple of per-sub-layer
    params for a Block, and ``None`` otherwise. Construction validates shapes.
    """

    name: str
    input_shape: tuple
    layers: tuple
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(self.params))
        if len(self.params) != len(self.layers):
            raise ValueError("one params entry per layer required")
        self.shapes()  # raises ShapeError on inconsistency
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            _check_params(i, layer, p, self.in_shape(i))

    def __len__(self):
        return len(self.layers)

    @property
    def n(self) -> int:
        return len(self.layers)

    def shapes(self) -> List[tuple]:
        """Output shape of every unit, in order."""
        out = []
        s = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                s = layer.output_shape(s)
            except ShapeError as e:
                raise ShapeError(i, e.expected, e.actual) from None
            out.append(s)
        return out

    def in_shape(self, i: int) -> tuple:
        return self.input_shape if i == 0 else self.shapes()[i - 1]

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1] if self.layers else self.input_shape

    def run(self, x: np.ndarray, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Batched inference through units ``start..stop-1``."""
        stop = self.n if stop is None else stop
        return tc.run_layers(self.layers[start:stop], self.params[start:stop], x)

    def forward(self, x: Tensor) -> Tensor:
        return Tensor(self.run(x.data[None])[0])

    def with_params(self, params) -> "LayerGraph":
        return LayerGraph(self.name, self.input_shape, self.layers, params)

    def renamed(self, name: str) -> "LayerGraph":
        return LayerGraph(name, self.input_shape, self.layers, self.params)

    def same_as(self, other: "LayerGraph") -> bool:
        """Structural equality with bit-exact weights."""
        return (self.name == other.name and self.input_shape == other.input_shape
                and self.layers == other.layers
                and _blob(self.params) == _blob(other.params))


def _blob(params) -> list:
    out = []
    for p in params:
        if p is None:
            out.append(None)
        elif isinstance(p[0], np.ndarray):
            out.append(tuple(a.tobytes() + str(a.shape).encode() for a in p))
        else:
            out.append(tuple(_blob(p)))
    return out


def _check_params(i, layer, p, in_shape):
    if isinstance(layer, Block):
        if p is None:
            if tc.has_params(layer):
                raise MissingWeights(i)
            return
        s = in_shape
        for sub, sp in zip(layer.layers, p):
            _check_params(i, sub, sp, s)
            s = sub.output_shape(s)
        return
    if isinstance(layer, tc.PARAMETERIZED):
        if p is None:
            raise MissingWeights(i)
        want = layer.param_shapes(in_shape)
        got = [tuple(a.shape) for a in p]
        if [tuple(w) for w in want] != got:
            raise ShapeError(i, want, got)


@dataclass(frozen=True)
class SplitPoint:
    """Device runs units ``0..index``; the edge runs the rest.

    ``index == -1`` is the full-offload sentinel and ``index == n - 1`` the
    local-only sentinel. ``output_bytes`` is the wire frame size that crosses
    the link (0 for local-only).
    """

    index: int
    tl_eligible: bool
    output_shape: tuple
    output_bytes: int
    kind: str = "interior"

    @property
    def is_sentinel(self) -> bool:
        return self.kind != "interior"


def local_only_index(graph: LayerGraph) -> int:
    return graph.n - 1


def propagate_shapes(graph: LayerGraph):
    """``(layer_id, output_shape, output_bytes)`` per top-level unit."""
    return [(i, s, frame_size(s, model_id_for(graph.name, i)))
            for i, s in enumerate(graph.shapes())]


def enumerate_split_points(graph: LayerGraph) -> List[SplitPoint]:
    shapes = graph.shapes()
    points = [SplitPoint(FULL_OFFLOAD, False, graph.input_shape,
                         frame_size(graph.input_shape, model_id_for(graph.name, FULL_OFFLOAD)),
                         "full-offload")]
    for i in range(graph.n - 1):
        s = shapes[i]
        points.append(SplitPoint(i, s[1] % 2 == 0 and s[2] % 2 == 0, s,
                                 frame_size(s, model_id_for(graph.name, i))))
    points.append(SplitPoint(graph.n - 1, False, graph.output_shape, 0, "local-only"))
    return points


def slice_graph(graph: LayerGraph, index: int):
    """Split into ``(head, tail)`` with the head running units ``0..index``."""
    if not FULL_OFFLOAD <= index <= graph.n - 1:
        raise InvalidSplit(f"split {index} outside [-1, {graph.n - 1}]")
    cut = index + 1
    head = LayerGraph(f"{graph.name}.head", graph.input_shape, graph.layers[:cut], graph.params[:cut])
    tail_in = graph.in_shape(cut) if cut < graph.n else graph.output_shape
    tail = LayerGraph(f"{graph.name}.tail", tail_in, graph.layers[cut:], graph.params[cut:])
    return head, tail


# ---------------------------------------------------------------------------
# Text model format
# ---------------------------------------------------------------------------

_NO_ARGS = {"relu": ReLU, "globalavgpool": GlobalAvgPool, "flatten": Flatten,
            "devicetl": DeviceTL, "edgetl": EdgeTL}


def _parse_kind(kind: str, args: List[str], lineno: int):
    try:
        nums = [int(a) for a in args]
    except ValueError:
        raise ParseError(f"non-integer parameter in {args}", lineno) from None
    if kind in _NO_ARGS:
        if nums:
            raise ParseError(f"{kind} takes no parameters", lineno)
        return _NO_ARGS[kind]()
    arity = {"conv2d": 4, "dense": 1, "maxpool": 2}
    if kind not in arity:
        raise ParseError(f"unknown layer kind {kind!r}", lineno)
    if len(nums) != arity[kind] or any(v < 0 for v in nums):
        raise ParseError(f"{kind} expects {arity[kind]} non-negative integers", lineno)
    if kind == "conv2d":
        if min(nums[:3]) < 1:
            raise ParseError("conv2d channels, kernel and stride must be positive", lineno)
        return Conv2D(*nums)
    if kind == "dense":
        if nums[0] < 1:
            raise ParseError("dense needs at least one unit", lineno)
        return Dense(nums[0])
    if min(nums) < 1:
        raise ParseError("maxpool kernel and stride must be positive", lineno)
    return MaxPool(*nums)


def _format_kind(layer) -> str:
    if isinstance(layer, Conv2D):
        return f"conv2d {layer.out_channels} {layer.kernel} {layer.stride} {layer.padding}"
    if isinstance(layer, Dense):
        return f"dense {layer.out_units}"
    if isinstance(layer, MaxPool):
        return f"maxpool {layer.kernel} {layer.stride}"
    return layer.name


def parse_model_text(text: str):
    """Parse model text into ``(name, input_shape, layers, weights_path)``."""
    name = None
    input_shape = None
    weights = None
    layers = []
    block = None  # (block_id, sub-layers, opening line)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        head = tok[0]
        if head == "model":
            if len(tok) != 2:
                raise ParseError("usage: model <name>", lineno)
            name = tok[1]
        elif head == "input":
            if len(tok) != 4:
                raise ParseError("usage: input <C> <H> <W>", lineno)
            try:
                input_shape = tuple(int(t) for t in tok[1:])
            except ValueError:
                raise ParseError("input dims must be integers", lineno) from None
            if min(input_shape) < 1:
                raise ParseError("input dims must be positive", lineno)
        elif head == "weights":
            if len(tok) != 2:
                raise ParseError("usage: weights <relative-path>", lineno)
            weights = tok[1]
        elif head == "block":
            if tok[1:] == ["end"]:
                if block is None:
                    raise ParseError("block end without begin", lineno)
                bid, subs, _ = block
                if len(subs) < 2:
                    raise ParseError("a block needs at least two layers", lineno)
                layers.append(Block(tuple(subs)))
                block = None
            elif len(tok) == 3 and tok[2] == "begin":
                if block is not None:
                    raise ParseError("blocks cannot nest", lineno)
                _expect_id(tok[1], len(layers), lineno)
                block = (int(tok[1]), [], lineno)
            else:
                raise ParseError("usage: block <id> begin | block end", lineno)
        elif head == "layer":
            if len(tok) < 3:
                raise ParseError("usage: layer <id> <kind> <params...>", lineno)
            kind = _parse_kind(tok[2].lower(), tok[3:], lineno)
            if block is not None:
                if isinstance(kind, (DeviceTL, EdgeTL)):
                    raise ParseError("transfer layers cannot sit inside a block", lineno)
                _expect_id(tok[1], len(block[1]), lineno)
                block[1].append(kind)
            else:
                _expect_id(tok[1], len(layers), lineno)
                layers.append(kind)
        else:
            raise ParseError(f"unknown directive {head!r}", lineno)
    if block is not None:
        raise ParseError("unterminated block", block[2])
    if name is None:
        raise ParseError("missing 'model <name>' directive")
    if input_shape is None:
        raise ParseError("missing 'input <C> <H> <W>' directive")
    return name, input_shape, layers, weights


def _expect_id(token, want, lineno):
    try:
        got = int(token)
    except ValueError:
        raise ParseError(f"layer id {token!r} is not an integer", lineno) from None
    if got != want:
        raise ParseError(f"layer id {got} out of order (expected {want})", lineno)


def format_model_text(graph: LayerGraph, weights_name: Optional[str] = None) -> str:
    lines = [f"model {graph.name}", "input {} {} {}".format(*graph.input_shape)]
    if weights_name:
        lines.append(f"weights {weights_name}")
    for i, layer in enumerate(graph.layers):
        if isinstance(layer, Block):
            lines.append(f"block {i} begin")
            lines.extend(f"  layer {j} {_format_kind(sub)}" for j, sub in enumerate(layer.layers))
            lines.append("block end")
        else:
            lines.append(f"layer {i} {_format_kind(layer)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Weight binary format. Entries are keyed by leaf index: the position of a
# parameterized layer in a depth-first walk of units and block sub-layers.
# ---------------------------------------------------------------------------

def _leaves(layers):
    """Yield ``(leaf_index, unit_index, sub_index_or_None, layer)``."""
    leaf = 0
    for i, layer in enumerate(layers):
        subs = layer.layers if isinstance(layer, Block) else (layer,)
        for j, sub in enumerate(subs):
            yield leaf, i, (j if isinstance(layer, Block) else None), sub
            leaf += 1


def write_weights(graph: LayerGraph, path) -> None:
    parts = [WEIGHTS_MAGIC, struct.pack("<H", WEIGHTS_VERSION)]
    for leaf, i, j, sub in _leaves(graph.layers):
        if not isinstance(sub, tc.PARAMETERIZED):
            continue
        p = graph.params[i] if j is None else graph.params[i][j]
        flat = np.concatenate([a.ravel() for a in p]).astype("<f4")
        parts.append(struct.pack("<IQ", leaf, flat.size))
        parts.append(flat.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(data: bytes) -> dict:
    if data[:4] != WEIGHTS_MAGIC:
        raise ParseError("weights file has bad magic")
    if len(data) < 6:
        raise ParseError("weights file truncated")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != WEIGHTS_VERSION:
        raise ParseError(f"weights version {version} unsupported")
    pos = 6
    out = {}
    while pos < len(data):
        if pos + 12 > len(data):
            raise ParseError("weights file truncated in entry header")
        leaf, count = struct.unpack_from("<IQ", data, pos)
        pos += 12
        if pos + 4 * count > len(data):
            raise ParseError(f"weights for leaf {leaf} truncated")
        out[leaf] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += 4 * count
    return out


def _unflatten(flat, layer, in_shape, unit_id):
    shapes = layer.param_shapes(in_shape)
    sizes = [int(np.prod(s)) for s in shapes]
    if flat.size != sum(sizes):
        raise ShapeError(unit_id, sum(sizes), flat.size)
    parts, pos = [], 0
    for s, k in zip(shapes, sizes):
        parts.append(flat[pos:pos + k].reshape(s).copy())
        pos += k
    return tuple(parts)


def _attach_weights(layers, input_shape, blobs):
    params = []
    s = input_shape
    leaf_of = {(i, j): leaf for leaf, i, j, _ in _leaves(layers)}
    for i, layer in enumerate(layers):
        if isinstance(layer, Block):
            subs, ss = [], s
            for j, sub in enumerate(layer.layers):
                if isinstance(sub, tc.PARAMETERIZED):
                    leaf = leaf_of[(i, j)]
                    if blobs is None or leaf not in blobs:
                        raise MissingWeights(i)
                    subs.append(_unflatten(blobs[leaf], sub, ss, i))
                else:
                    subs.append(None)
                ss = sub.output_shape(ss)
            params.append(tuple(subs) if tc.has_params(layer) else None)
        elif isinstance(layer, tc.PARAMETERIZED):
            leaf = leaf_of[(i, None)]
            if blobs is None or leaf not in blobs:
                raise MissingWeights(i)
            params.append(_unflatten(blobs[leaf], layer, s, i))
        else:
            params.append(None)
        try:
            s = layer.output_shape(s)
        except ShapeError as e:
            raise ShapeError(i, e.expected, e.actual) from None
    return params


def _propagate(layers, s):
    for i, layer in enumerate(layers):
        try:
            s = layer.output_shape(s)
        except ShapeError as e:
            raise ShapeError(i, e.expected, e.actual) from None
    return s


def load_model(path) -> LayerGraph:
    path = Path(path)
    name, input_shape, layers, weights = parse_model_text(path.read_text(encoding="utf-8"))
    _propagate(layers, input_shape)
    blobs = None
    if weights is not None:
        wpath = path.parent / weights
        if not wpath.exists():
            raise ParseError(f"weights file {weights!r} not found")
        blobs = read_weights(wpath.read_bytes())
    params = _attach_weights(layers, input_shape, blobs)
    return LayerGraph(name, input_shape, layers, params)


def save_model(graph: LayerGraph, path) -> Path:
    """Write the model text file and, when needed, a companion ``.slkw`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights_name = None
    if any(tc.has_params(l) for l in graph.layers):
        weights_name = path.with_suffix(".slkw").name
        write_weights(graph, path.parent / weights_name)
    path.write_text(format_model_text(graph, weights_name), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Builtin synthetic models
# ---------------------------------------------------------------------------

def _conv(c, k=3, s=1):
    return Conv2D(c, k, s, k // 2)


SYNTHETIC = {
    # 3x16x16 input, sized for the toy classification task
    "tiny-cnn-8": ((3, 16, 16), [
        _conv(16), ReLU(), MaxPool(2, 2),
        _conv(32), ReLU(), MaxPool(2, 2),
        Flatten(), Dense(4),
    ]),
    "branchy-12": ((3, 32, 32), [
        _conv(16), ReLU(), MaxPool(2, 2),
        Block((_conv(16), ReLU(), _conv(16, 1))), ReLU(),
        _conv(32), ReLU(), MaxPool(2, 2),
        _conv(32), ReLU(), GlobalAvgPool(), Dense(10),
    ]),
    # 56 -> 28 -> 14 -> 7 leaves odd spatial dims near the end
    "deep-20": ((3, 56, 56), [
        _conv(16), ReLU(), MaxPool(2, 2),
        _conv(64), ReLU(),
        Block((_conv(64), ReLU(), _conv(64))), ReLU(), MaxPool(2, 2),
        _conv(128), ReLU(),
        Block((_conv(128), ReLU(), _conv(128))), ReLU(), MaxPool(2, 2),
        _conv(128), ReLU(),
        _conv(128, 3, 2), ReLU(),
        GlobalAvgPool(), Flatten(), Dense(10),
    ]),
}


def make_synthetic_model(spec: str, seed: int = 0) -> LayerGraph:
    if spec not in SYNTHETIC:
        raise UnknownSpec(f"unknown builtin model {spec!r}; choose from {sorted(SYNTHETIC)}")
    input_shape, layers = SYNTHETIC[spec]
    return build_model(spec, input_shape, layers, seed)


def build_model(name: str, input_shape, layers, seed: int = 0) -> LayerGraph:
    """Graph over ``layers`` with freshly initialised weights."""
    rng = np.random.default_rng(seed)
    params = []
    s = input_shape
    for layer in layers:
        params.append(tc.init_params(layer, s, rng) if tc.has_params(layer) else None)
        s = layer.output_shape(s)
    return LayerGraph(name, input_shape, layers, params)


def random_input(graph: LayerGraph, seed: int = 0) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(graph.input_shape).astype(np.float32))
