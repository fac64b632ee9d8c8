"""Network descriptions and their execution.

A network is a DAG of :class:`LayerNode` records in topological order, grouped
into named modules (``Front``, ``Tin.1`` ... ``Tin.6``, detection heads). The
same builder assembles the three shipped variants and anything parsed from a
config file, so a description built either way behaves identically.

The three variants:

* ``ref`` - single-track backbone, one detection head on a coarse grid.
* ``mffd_a`` - adds a second head on a 2x finer grid, fed by concatenating a
  mid-level tap with the upsampled last bottleneck stage.
* ``mffd_b`` - halves the last backbone stage, fuses first, then runs both
  heads after the fusion.

Weights live outside the description in a plain dict keyed by node id (a
"weight store"), so one immutable spec can serve many weight sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError

DEFAULT_PRIORS: tuple[tuple[float, float], ...] = (
    (0.6, 1.4),
    (1.2, 1.0),
    (2.2, 1.8),
    (4.5, 3.0),
    (8.0, 5.0),
)

VARIANT_NAMES = ("ref", "mffd_a", "mffd_b")


@dataclass(frozen=True)
class LayerNode:
    """One primitive operation in the graph."""

    id: str
    kind: str  # input | conv | bn | relu | maxpool | upsample | concat | detect
    inputs: tuple[str, ...]
    module: str
    k: int = 0  # conv/detect kernel size
    out_channels: int = 0  # conv/detect filter count
    stride: int = 1
    boxes: int = 0  # detect only
    classes: int = 0  # detect only


@dataclass(frozen=True)
class ModuleEntry:
    """A named group of nodes: one config line's worth of network.

    ``tap`` is the node other modules reference by this module's name (the
    last node before any trailing pool); ``report`` is the node whose shape
    the summary tables show. They differ only where a fusion tap sits above
    a pool.
    """

    name: str
    kind: str  # front | tinier | maxpool | upsample | concat | detect
    node_ids: tuple[str, ...]
    tap: str
    report: str


@dataclass(frozen=True)
class NetworkSpec:
    nodes: tuple[LayerNode, ...]
    modules: tuple[ModuleEntry, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)
    anchors: tuple[tuple[float, float], ...] = DEFAULT_PRIORS
    variant: str = "custom"

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def module(self, name: str) -> ModuleEntry:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)

    def detect_nodes(self) -> tuple[LayerNode, ...]:
        return tuple(n for n in self.nodes if n.kind == "detect")


@dataclass(frozen=True)
class ParamReport:
    """Per-module convolution weight counts (M * N * k * k, no bias/BN)."""

    rows: tuple[tuple[str, int], ...]
    total: int


class NetBuilder:
    """Assembles a :class:`NetworkSpec` one module at a time.

    Each call appends a module whose default input is the running stream
    (the previous module's last node); ``src`` overrides that with a named
    tap. A bare :meth:`maxpool` right after a front/tinier module is folded
    into it, matching how the summary tables group stages.
    """

    def __init__(self, input_shape: tuple[int, int, int]):
        c, h, w = input_shape
        if min(input_shape) < 1:
            raise ConfigError(f"input shape must be positive, got {input_shape}")
        self.input_shape = (int(c), int(h), int(w))
        self._nodes: list[LayerNode] = [LayerNode("input", "input", (), "input")]
        self._modules: list[ModuleEntry] = []
        self._stream = "input"
        self._auto = {"maxpool": 0, "upsample": 0, "concat": 0}
        self._anchors: tuple[tuple[float, float], ...] = DEFAULT_PRIORS

    # -- helpers ------------------------------------------------------------

    def _module_by_name(self, name: str) -> ModuleEntry | None:
        for m in self._modules:
            if m.name == name:
                return m
        return None

    def modules(self) -> tuple[ModuleEntry, ...]:
        return tuple(self._modules)

    def resolve(self, name: str) -> str:
        """Map a module (or raw node) name to the node id it taps."""
        m = self._module_by_name(name)
        if m is not None:
            return m.tap
        if any(n.id == name for n in self._nodes):
            return name
        raise ConfigError(f"unknown layer reference {name!r}")

    def _entry(self, src: str | None) -> str:
        return self._stream if src is None else self.resolve(src)

    def _add_node(self, node: LayerNode) -> str:
        if any(n.id == node.id for n in self._nodes):
            raise ConfigError(f"duplicate node id {node.id!r}")
        self._nodes.append(node)
        return node.id

    def _add_module(self, entry: ModuleEntry):
        if self._module_by_name(entry.name) is not None:
            raise ConfigError(f"duplicate module name {entry.name!r}")
        self._modules.append(entry)
        self._stream = entry.node_ids[-1]

    def _auto_name(self, kind: str) -> str:
        self._auto[kind] += 1
        return f"{kind}{self._auto[kind]}"

    def _conv_bn_relu(self, module: str, tag: str, prev: str, k: int, out_c: int, stride: int) -> tuple[str, list[str]]:
        ids = []
        conv = self._add_node(LayerNode(f"{module}.conv{tag}", "conv", (prev,), module, k=k, out_channels=out_c, stride=stride))
        bn = self._add_node(LayerNode(f"{module}.bn{tag}", "bn", (conv,), module))
        out = self._add_node(LayerNode(f"{module}.relu{tag}", "relu", (bn,), module))
        ids += [conv, bn, out]
        return out, ids

    # -- module kinds --------------------------------------------------------

    def front(self, filters: tuple[int, int, int], src: str | None = None, name: str = "Front"):
        f1, f2, f3 = filters
        if min(filters) < 1:
            raise ConfigError(f"front filter counts must be positive, got {filters}")
        prev = self._entry(src)
        ids: list[str] = []
        prev, made = self._conv_bn_relu(name, "1", prev, 3, f1, stride=2)
        ids += made
        prev, made = self._conv_bn_relu(name, "2", prev, 3, f2, stride=1)
        ids += made
        prev, made = self._conv_bn_relu(name, "3", prev, 3, f3, stride=1)
        ids += made
        pool = self._add_node(LayerNode(f"{name}.pool", "maxpool", (prev,), name))
        ids.append(pool)
        self._add_module(ModuleEntry(name, "front", tuple(ids), tap=pool, report=pool))
        return self

    def tinier(self, name: str, n1: int, n3: int, src: str | None = None):
        if n1 < 1 or n3 < 1:
            raise ConfigError(f"tinier filter counts must be positive, got ({n1}, {n3})")
        prev = self._entry(src)
        ids: list[str] = []
        for i, (k, out_c) in enumerate(((1, n1), (3, n3), (1, n1), (3, n3)), start=1):
            prev, made = self._conv_bn_relu(name, str(i), prev, k, out_c, stride=1)
            ids += made
        self._add_module(ModuleEntry(name, "tinier", tuple(ids), tap=prev, report=prev))
        return self

    def maxpool(self, src: str | None = None):
        prev_mod = self._modules[-1] if self._modules else None
        fold = (
            src is None
            and prev_mod is not None
            and prev_mod.kind in ("front", "tinier")
            and self._stream == prev_mod.node_ids[-1]
            and not prev_mod.node_ids[-1].endswith(".pool")
        )
        if fold:
            pool = self._add_node(LayerNode(f"{prev_mod.name}.pool", "maxpool", (self._stream,), prev_mod.name))
            self._modules[-1] = replace(
                prev_mod, node_ids=prev_mod.node_ids + (pool,), report=pool
            )
            self._stream = pool
        else:
            name = self._auto_name("maxpool")
            pool = self._add_node(LayerNode(name, "maxpool", (self._entry(src),), name))
            self._add_module(ModuleEntry(name, "maxpool", (pool,), tap=pool, report=pool))
        return self

    def upsample(self, src: str):
        name = self._auto_name("upsample")
        node = self._add_node(LayerNode(name, "upsample", (self.resolve(src),), name))
        self._add_module(ModuleEntry(name, "upsample", (node,), tap=node, report=node))
        return self

    def concat(self, *srcs: str):
        if len(srcs) < 2:
            raise ConfigError("concat needs at least two inputs")
        name = self._auto_name("concat")
        node = self._add_node(LayerNode(name, "concat", tuple(self.resolve(s) for s in srcs), name))
        self._add_module(ModuleEntry(name, "concat", (node,), tap=node, report=node))
        return self

    def detect(self, name: str, boxes: int, classes: int, src: str | None = None):
        if boxes < 1 or classes < 1:
            raise ConfigError(f"detect needs boxes >= 1 and classes >= 1, got ({boxes}, {classes})")
        prev = self._entry(src)
        n = boxes * (5 + classes)
        node = self._add_node(
            LayerNode(name, "detect", (prev,), name, k=1, out_channels=n, stride=1, boxes=boxes, classes=classes)
        )
        display = {"det_low": "Det", "det_high": "Det.hi"}.get(name, name)
        self._add_module(ModuleEntry(display, "detect", (node,), tap=node, report=node))
        return self

    def anchors(self, priors) -> "NetBuilder":
        priors = tuple((float(w), float(h)) for w, h in priors)
        if not priors or any(w <= 0 or h <= 0 for w, h in priors):
            raise ConfigError(f"anchor priors must be positive, got {priors}")
        self._anchors = priors
        return self

    def report_pre_pool(self, module_name: str):
        """Make a module's summary row show its pre-pool (fusion tap) shape."""
        m = self._module_by_name(module_name)
        if m is None:
            raise ConfigError(f"unknown module {module_name!r}")
        self._modules[[x.name for x in self._modules].index(module_name)] = replace(m, report=m.tap)
        return self

    def build(self, variant: str = "custom") -> NetworkSpec:
        spec = NetworkSpec(
            nodes=tuple(self._nodes),
            modules=tuple(self._modules),
            input_shape=self.input_shape,
            anchors=self._anchors,
            variant=variant,
        )
        if not spec.detect_nodes():
            raise ConfigError("network has no detect head")
        infer_shapes(spec)  # surfaces wiring mistakes at build time
        return spec


def build_variant(
    variant: str,
    classes: int = 3,
    boxes: int = 5,
    input_hw: tuple[int, int] = (320, 576),
    width_div: int = 1,
    anchors=None,
) -> NetworkSpec:
    """Construct one of the shipped variants.

    ``width_div`` divides every backbone filter count (minimum 1); detection
    heads keep their boxes * (5 + classes) output layout. Input height and
    width must be multiples of 32 (five stride-2 stages).
    """
    key = variant.lower()
    if key == "reference":
        key = "ref"
    if key not in VARIANT_NAMES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANT_NAMES}")
    h, w = input_hw
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ConfigError(f"input height/width must be positive multiples of 32, got {h}x{w}")
    if width_div < 1:
        raise ValueError(f"width_div must be >= 1, got {width_div}")

    def d(c: int) -> int:
        return max(1, c // width_div)

    b = NetBuilder((3, h, w))
    b.front((d(64), d(64), d(128)))
    b.tinier("Tin.1", d(16), d(128)).maxpool()
    b.tinier("Tin.2", d(32), d(256)).maxpool()
    b.tinier("Tin.3", d(64), d(512)).maxpool()
    if key in ("ref", "mffd_a"):
        b.tinier("Tin.4", d(128), d(1024))
        b.detect("det_low", boxes, classes)
        if key == "mffd_a":
            b.upsample(src="Tin.4")
            b.concat("Tin.3", "upsample1")
            b.tinier("Tin.5", d(128), d(512))
            b.detect("det_high", boxes, classes)
    else:  # mffd_b: thinner last stage, fusion first, both heads after it
        b.tinier("Tin.4", d(128), d(512))
        b.upsample(src="Tin.4")
        b.concat("Tin.3", "upsample1")
        b.tinier("Tin.5", d(128), d(512))
        b.detect("det_high", boxes, classes)
        b.maxpool(src="Tin.5")
        b.tinier("Tin.6", d(128), d(1024))
        b.detect("det_low", boxes, classes)
    b.report_pre_pool("Tin.3")
    if anchors is not None:
        b.anchors(anchors)
    return b.build(variant=key)


# -- shape and parameter accounting ------------------------------------------


def infer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, int, int]]:
    """Static (C, H, W) of every node, without touching any weights."""
    shapes: dict[str, tuple[int, int, int]] = {}
    for n in spec.nodes:
        if n.kind == "input":
            shapes[n.id] = spec.input_shape
            continue
        ins = [shapes[i] for i in n.inputs]
        c, h, w = ins[0]
        if n.kind in ("conv", "detect"):
            shapes[n.id] = (
                n.out_channels,
                tc.conv_out_size(h, n.k, n.stride, "same"),
                tc.conv_out_size(w, n.k, n.stride, "same"),
            )
        elif n.kind in ("bn", "relu"):
            shapes[n.id] = (c, h, w)
        elif n.kind == "maxpool":
            if h % 2 or w % 2:
                raise ShapeError(f"node {n.id!r}: maxpool2x2 needs even spatial dims, has {h}x{w}")
            shapes[n.id] = (c, h // 2, w // 2)
        elif n.kind == "upsample":
            shapes[n.id] = (c, 2 * h, 2 * w)
        elif n.kind == "concat":
            for other in ins[1:]:
                if other[1:] != (h, w):
                    raise ShapeError(f"node {n.id!r}: concat spatial mismatch {other[1:]} vs {(h, w)}")
            shapes[n.id] = (sum(s[0] for s in ins), h, w)
        else:
            raise ConfigError(f"node {n.id!r}: unknown kind {n.kind!r}")
    return shapes


def parameterized_nodes(spec: NetworkSpec) -> tuple[LayerNode, ...]:
    """Conv, detect and bn nodes in topological order (the weight-store keys)."""
    return tuple(n for n in spec.nodes if n.kind in ("conv", "detect", "bn"))


def _conv_in_channels(spec: NetworkSpec, shapes: dict[str, tuple[int, int, int]], n: LayerNode) -> int:
    return shapes[n.inputs[0]][0]


def count_params(spec: NetworkSpec) -> ParamReport:
    """Convolution weight counts per module: sum of M * N * k * k.

    Biases and batch-norm parameters are deliberately excluded; this is the
    figure the size-reduction arithmetic of the architecture is stated in.
    """
    shapes = infer_shapes(spec)
    rows = []
    total = 0
    for m in spec.modules:
        count = 0
        for nid in m.node_ids:
            n = spec.node(nid)
            if n.kind in ("conv", "detect"):
                count += _conv_in_channels(spec, shapes, n) * n.out_channels * n.k * n.k
        if count:
            rows.append((m.name, count))
            total += count
    return ParamReport(tuple(rows), total)


def count_all_trainables(spec: NetworkSpec) -> int:
    """Everything gradient descent touches: conv weights + biases + BN gamma/beta."""
    shapes = infer_shapes(spec)
    total = 0
    for n in spec.nodes:
        if n.kind in ("conv", "detect"):
            total += _conv_in_channels(spec, shapes, n) * n.out_channels * n.k * n.k + n.out_channels
        elif n.kind == "bn":
            total += 2 * shapes[n.id][0]
    return total


def count_serialized(spec: NetworkSpec) -> int:
    """Floats in a weight file: trainables plus BN running mean/var."""
    shapes = infer_shapes(spec)
    extra = sum(2 * shapes[n.id][0] for n in spec.nodes if n.kind == "bn")
    return count_all_trainables(spec) + extra


# -- execution ----------------------------------------------------------------

WeightStore = dict  # node id -> ConvWeights | BNParams


def zero_weights(spec: NetworkSpec, dtype=np.float32) -> WeightStore:
    """All-zero weight store matching ``spec`` (useful as a shape template)."""
    shapes = infer_shapes(spec)
    store: WeightStore = {}
    for n in parameterized_nodes(spec):
        if n.kind == "bn":
            c = shapes[n.id][0]
            store[n.id] = tc.BNParams(
                np.zeros(c, dtype=dtype), np.zeros(c, dtype=dtype), np.zeros(c, dtype=dtype), np.zeros(c, dtype=dtype)
            )
        else:
            store[n.id] = tc.ConvWeights.zeros(n.out_channels, _conv_in_channels(spec, shapes, n), n.k, dtype)
    return store


def forward(
    spec: NetworkSpec,
    weights: WeightStore,
    x: np.ndarray,
    caches: dict[str, dict] | None = None,
) -> dict[str, np.ndarray]:
    """Run the network on one image, returning every node's activation.

    ``x`` must match ``spec.input_shape`` exactly. When ``caches`` is given,
    each conv node stores its im2col matrix there (keyed by node id) for the
    training backward pass to reuse.
    """
    tc.check_chw(x, "network input")
    if tuple(x.shape) != spec.input_shape:
        raise ShapeError(f"input shape {tuple(x.shape)} != network input {spec.input_shape}")
    acts: dict[str, np.ndarray] = {}
    for n in spec.nodes:
        if n.kind == "input":
            acts[n.id] = x
            continue
        ins = [acts[i] for i in n.inputs]
        if n.kind in ("conv", "detect"):
            cache = None
            if caches is not None:
                cache = caches.setdefault(n.id, {})
            acts[n.id] = tc.conv2d_fast(ins[0], weights[n.id], stride=n.stride, pad="same", _cache=cache)
        elif n.kind == "bn":
            acts[n.id] = tc.batchnorm_infer(ins[0], weights[n.id])
        elif n.kind == "relu":
            acts[n.id] = tc.relu(ins[0])
        elif n.kind == "maxpool":
            acts[n.id] = tc.maxpool2x2(ins[0])
        elif n.kind == "upsample":
            acts[n.id] = tc.upsample2x_nearest(ins[0])
        elif n.kind == "concat":
            acts[n.id] = tc.concat_channels(ins)
        else:
            raise ConfigError(f"node {n.id!r}: unknown kind {n.kind!r}")
    return acts
