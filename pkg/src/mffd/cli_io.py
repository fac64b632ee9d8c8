"""Everything that crosses a file boundary.

* binary PPM (P6) in, binary PGM (P5) out, plus bilinear resizing with
  half-pixel centers and plain-stretch box rescaling;
* KITTI-style label files and ``class score x1 y1 x2 y2`` detection files;
* the weight-file format (magic ``MFFD``, version, float count, float32
  little-endian body in topological node order);
* the line-oriented network config grammar and its serializer;
* IoU k-means for fitting anchor priors to a box population.

Malformed input raises :class:`~mffd.errors.FormatError` with a byte offset
or line number; structural problems in a parsed network raise
:class:`~mffd.errors.ConfigError`.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from . import netgraph as ng
from . import tensor_core as tc
from .detect_head import AnchorSet
from .errors import ConfigError, FormatError
from .evaluator import GtBox

__all__ = [
    "ppm_size",
    "load_ppm",
    "save_ppm",
    "save_pgm",
    "resize_bilinear",
    "scale_box",
    "parse_kitti_labels",
    "parse_kitti_label_text",
    "write_detections",
    "read_detections",
    "save_weights",
    "load_weights",
    "parse_network",
    "serialize_network",
    "read_network",
    "write_network",
    "fit_anchors",
    "KITTI_CLASSES",
    "WEIGHTS_MAGIC",
    "WEIGHTS_VERSION",
]

KITTI_CLASSES = ("Car", "Pedestrian", "Cyclist")

WEIGHTS_MAGIC = b"MFFD"
WEIGHTS_VERSION = 1


# -- images --------------------------------------------------------------------


def _next_token(buf: bytes, pos: int, path: str) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"{path}: truncated header at byte {pos}")
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def ppm_size(path) -> tuple[int, int]:
    """(height, width) from a P6 header without decoding the pixels."""
    with open(path, "rb") as f:
        head = f.read(65536)
    tok, pos = _next_token(head, 0, str(path))
    if tok != b"P6":
        raise FormatError(f"{path}: expected P6 magic at byte 0, found {tok[:8]!r}")
    w_tok, pos = _next_token(head, pos, str(path))
    h_tok, _ = _next_token(head, pos, str(path))
    if not (w_tok.isdigit() and h_tok.isdigit()):
        raise FormatError(f"{path}: bad header dimensions {w_tok!r} {h_tok!r}")
    return int(h_tok), int(w_tok)


def load_ppm(path) -> np.ndarray:
    """Binary PPM (P6) to a float32 (3, H, W) array scaled to [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    tok, pos = _next_token(buf, 0, str(path))
    if tok != b"P6":
        raise FormatError(f"{path}: expected P6 magic at byte 0, found {tok[:8]!r}")
    dims = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos, str(path))
        if not tok.isdigit():
            raise FormatError(f"{path}: bad header token {tok!r} at byte {pos - len(tok)}")
        dims.append(int(tok))
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported maxval {maxval} (need 1..255)")
    pos += 1  # exactly one whitespace byte separates maxval from pixel data
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(f"{path}: pixel data truncated at byte {len(buf)} (need {pos + need} bytes)")
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    img = pix.reshape(h, w, 3).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(maxval)).copy()


def save_ppm(path, image: np.ndarray):
    """Float (3, H, W) in [0, 1] to binary PPM."""
    tc.check_chw(image, "ppm image")
    if image.shape[0] != 3:
        raise ValueError(f"ppm needs 3 channels, got {image.shape[0]}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (image.shape[2], image.shape[1]))
        f.write(data.tobytes())


def save_pgm(path, gray: np.ndarray):
    """Float (H, W) in [0, 1] to binary PGM (P5)."""
    if gray.ndim != 2 or min(gray.shape) < 1:
        raise ValueError(f"pgm needs a 2-d array, got shape {getattr(gray, 'shape', None)}")
    data = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        f.write(data.tobytes())


def resize_bilinear(image: np.ndarray, out_h: int = 320, out_w: int = 576) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (plain stretch, no letterbox)."""
    tc.check_chw(image, "resize input")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, w = image.shape
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(image.dtype)[None, :, None]
    wx = (xs - x0).astype(image.dtype)[None, None, :]
    rows0 = image[:, y0]
    rows1 = image[:, y1]
    top = rows0[:, :, x0] * (1 - wx) + rows0[:, :, x1] * wx
    bot = rows1[:, :, x0] * (1 - wx) + rows1[:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def scale_box(box, sx: float, sy: float):
    """Rescale an (x1, y1, x2, y2) rectangle by per-axis stretch factors."""
    x1, y1, x2, y2 = box
    return (x1 * sx, y1 * sy, x2 * sx, y2 * sy)


# -- labels and detections -------------------------------------------------------


def parse_kitti_label_text(text: str, path: str = "<string>") -> tuple[list[GtBox], list[tuple]]:
    """KITTI label lines to (kept ground truth, DontCare rectangles).

    Keeps Car/Pedestrian/Cyclist (case-sensitive), returns DontCare regions
    separately, silently drops other classes. Lines need >= 15 whitespace
    fields: type, truncation, occlusion, alpha, bbox x1 y1 x2 y2, then 3-d
    fields this package ignores.
    """
    kept: list[GtBox] = []
    dont_care: list[tuple] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 15:
            raise FormatError(f"{path}:{lineno}: expected >= 15 fields, got {len(fields)}")
        cls = fields[0]
        try:
            trunc = float(fields[1])
            occ = int(float(fields[2]))
            box = tuple(float(v) for v in fields[4:8])
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: bad numeric field ({e})") from None
        if cls == "DontCare":
            dont_care.append(box)
        elif cls in KITTI_CLASSES:
            kept.append(GtBox(cls, box, truncation=trunc, occlusion=occ))
    return kept, dont_care


def parse_kitti_labels(path) -> tuple[list[GtBox], list[tuple]]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_kitti_label_text(f.read(), str(path))


def write_detections(path, dets, class_names) -> None:
    """One ``class score x1 y1 x2 y2`` line per detection, six decimals."""
    lines = []
    for d in dets:
        if not 0 <= d.class_id < len(class_names):
            raise ValueError(f"class id {d.class_id} has no name (have {len(class_names)})")
        x1, y1, x2, y2 = d.bbox
        lines.append(f"{class_names[d.class_id]} {d.score:.6f} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path) -> list[tuple]:
    """Detection files back to (class_name, score, bbox) evaluator tuples."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            try:
                score = float(fields[1])
                box = tuple(float(v) for v in fields[2:6])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: bad numeric field ({e})") from None
            out.append((fields[0], score, box))
    return out


# -- weight files ----------------------------------------------------------------


def _node_arrays(n: ng.LayerNode, params) -> list[np.ndarray]:
    if n.kind in ("conv", "detect"):
        return [params.weights, params.bias]
    return [params.gamma, params.beta, params.mean, params.var]


def save_weights(path, spec: ng.NetworkSpec, store: ng.WeightStore) -> None:
    """Header (magic, version, float count) + float32 LE body in node order.

    Convs serialize as weights [out][in][ky][kx] then bias; batch norms as
    gamma, beta, running mean, running var.
    """
    chunks = []
    count = 0
    for n in ng.parameterized_nodes(spec):
        for a in _node_arrays(n, store[n.id]):
            a = np.ascontiguousarray(a, dtype="<f4")
            chunks.append(a.tobytes())
            count += a.size
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(struct.pack("<Q", count))
        for ch in chunks:
            f.write(ch)


def load_weights(path, spec: ng.NetworkSpec) -> ng.WeightStore:
    """Read a weight file back, cross-checking the header against ``spec``."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16:
        raise FormatError(f"{path}: file too short for a weights header ({len(buf)} bytes)")
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<Q", buf, 8)
    expected = ng.count_serialized(spec)
    if count != expected:
        raise FormatError(f"{path}: header says {count} floats, network needs {expected}")
    if len(buf) != 16 + 4 * count:
        raise FormatError(f"{path}: body is {len(buf) - 16} bytes, header promises {4 * count}")
    flat = np.frombuffer(buf, dtype="<f4", offset=16)
    shapes = ng.infer_shapes(spec)
    store: ng.WeightStore = {}
    pos = 0

    def take(num: int, shape) -> np.ndarray:
        nonlocal pos
        a = flat[pos : pos + num].reshape(shape).astype(np.float32)
        pos += num
        return a

    for n in ng.parameterized_nodes(spec):
        if n.kind == "bn":
            c = shapes[n.id][0]
            g, b, m, v = (take(c, (c,)) for _ in range(4))
            store[n.id] = tc.BNParams(g, b, m, v)
        else:
            m_in = shapes[n.inputs[0]][0]
            w = take(n.out_channels * m_in * n.k * n.k, (n.out_channels, m_in, n.k, n.k))
            b = take(n.out_channels, (n.out_channels,))
            store[n.id] = tc.ConvWeights(w, b)
    return store


# -- network config text -----------------------------------------------------------


def _fmt_g(x: float) -> str:
    return f"{x:g}"


def parse_network(text: str, name: str = "<config>") -> ng.NetworkSpec:
    """Line-oriented network description to a :class:`NetworkSpec`.

    Grammar (one statement per line, ``#`` starts a comment)::

        input C H W
        front f1 f2 f3
        tinier NAME n1 n3
        maxpool
        upsample from=NAME
        concat A B [C ...]
        detect NAME boxes classes
        anchors w1,h1 w2,h2 ...

    Any layer line also accepts a trailing ``from=NAME`` to read a named tap
    instead of the running stream.
    """
    builder: ng.NetBuilder | None = None
    anchors = None
    referenced: set[str] = set()

    def fail(lineno: int, msg: str):
        raise FormatError(f"{name}:{lineno}: {msg}")

    def ints(lineno, fields, n):
        if len(fields) != n:
            fail(lineno, f"expected {n} integer arguments, got {len(fields)}")
        try:
            return [int(v) for v in fields]
        except ValueError:
            fail(lineno, f"bad integer in {fields}")

    for lineno, line in enumerate(text.splitlines(), start=1):
        stmt = line.split("#", 1)[0].strip()
        if not stmt:
            continue
        fields = stmt.split()
        op, args = fields[0], fields[1:]
        src = None
        if args and args[-1].startswith("from="):
            src = args[-1][5:]
            args = args[:-1]
            if not src:
                fail(lineno, "empty from= reference")
        if op == "input":
            if builder is not None:
                fail(lineno, "duplicate input line")
            c, h, w = ints(lineno, args, 3)
            builder = ng.NetBuilder((c, h, w))
            continue
        if op == "anchors":
            pairs = []
            for tok in args:
                parts = tok.split(",")
                if len(parts) != 2:
                    fail(lineno, f"anchor {tok!r} is not w,h")
                try:
                    pairs.append((float(parts[0]), float(parts[1])))
                except ValueError:
                    fail(lineno, f"bad anchor number in {tok!r}")
            if not pairs:
                fail(lineno, "anchors line needs at least one w,h pair")
            anchors = pairs
            continue
        if builder is None:
            fail(lineno, f"{op!r} before the input line")
        try:
            if src is not None:
                referenced.add(builder.resolve(src))
            if op == "front":
                f1, f2, f3 = ints(lineno, args, 3)
                builder.front((f1, f2, f3), src=src)
            elif op == "tinier":
                if len(args) != 3:
                    fail(lineno, f"tinier needs NAME n1 n3, got {args}")
                n1, n3 = ints(lineno, args[1:], 2)
                builder.tinier(args[0], n1, n3, src=src)
            elif op == "maxpool":
                if args:
                    fail(lineno, f"maxpool takes no arguments, got {args}")
                builder.maxpool(src=src)
            elif op == "upsample":
                if args or src is None:
                    fail(lineno, "upsample needs exactly 'upsample from=NAME'")
                builder.upsample(src)
            elif op == "concat":
                if src is not None:
                    fail(lineno, "concat lists its inputs directly, from= is not allowed")
                builder.concat(*args)
                referenced.update(builder.resolve(s) for s in args)
            elif op == "detect":
                if len(args) != 3:
                    fail(lineno, f"detect needs NAME boxes classes, got {args}")
                boxes, classes = ints(lineno, args[1:], 2)
                builder.detect(args[0], boxes, classes, src=src)
            else:
                fail(lineno, f"unknown statement {op!r}")
        except ConfigError as e:
            raise ConfigError(f"{name}:{lineno}: {e}") from None
    if builder is None:
        raise FormatError(f"{name}: no input line")
    if anchors is not None:
        builder.anchors(anchors)
    # fusion taps that feed another layer report their pre-pool shape
    for m in builder.modules():
        if m.tap != m.node_ids[-1] and m.tap in referenced:
            builder.report_pre_pool(m.name)
    return builder.build()


def serialize_network(spec: ng.NetworkSpec) -> str:
    """Canonical config text; parse(serialize(spec)) rebuilds the same layout."""
    taps = {m.tap: m.name for m in spec.modules}

    def ref_name(node_id: str) -> str:
        if node_id in taps:
            return taps[node_id]
        raise ConfigError(f"cannot serialize: node {node_id!r} is not a referencable tap")

    c, h, w = spec.input_shape
    lines = [f"input {c} {h} {w}"]
    stream = "input"
    for m in spec.modules:
        first = spec.node(m.node_ids[0])
        entry = first.inputs[0]
        suffix = ""
        if entry != stream and m.kind != "concat":
            suffix = f" from={ref_name(entry)}"
        if m.kind == "front":
            convs = [spec.node(i) for i in m.node_ids if spec.node(i).kind == "conv"]
            lines.append(f"front {convs[0].out_channels} {convs[1].out_channels} {convs[2].out_channels}{suffix}")
        elif m.kind == "tinier":
            convs = [spec.node(i) for i in m.node_ids if spec.node(i).kind == "conv"]
            lines.append(f"tinier {m.name} {convs[0].out_channels} {convs[1].out_channels}{suffix}")
            if spec.node(m.node_ids[-1]).kind == "maxpool":
                lines.append("maxpool")
        elif m.kind == "maxpool":
            lines.append(f"maxpool{suffix}")
        elif m.kind == "upsample":
            lines.append(f"upsample from={ref_name(entry)}")
        elif m.kind == "concat":
            node = spec.node(m.node_ids[0])
            lines.append("concat " + " ".join(ref_name(i) for i in node.inputs))
        elif m.kind == "detect":
            node = spec.node(m.node_ids[0])
            lines.append(f"detect {node.id} {node.boxes} {node.classes}{suffix}")
        else:
            raise ConfigError(f"cannot serialize module kind {m.kind!r}")
        stream = m.node_ids[-1]
    lines.append("anchors " + " ".join(f"{_fmt_g(aw)},{_fmt_g(ah)}" for aw, ah in spec.anchors))
    return "\n".join(lines) + "\n"


def read_network(path) -> ng.NetworkSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_network(f.read(), name=str(path))


def write_network(path, spec: ng.NetworkSpec) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_network(spec))


# -- anchor fitting -----------------------------------------------------------------


def _wh_iou_matrix(boxes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    inter = np.minimum(boxes[:, None, 0], centers[None, :, 0]) * np.minimum(boxes[:, None, 1], centers[None, :, 1])
    areas = boxes[:, 0] * boxes[:, 1]
    careas = centers[:, 0] * centers[:, 1]
    return inter / (areas[:, None] + careas[None, :] - inter)


def fit_anchors(
    wh_pairs,
    k: int = 5,
    grid_hw: tuple[int, int] = (10, 18),
    seed: int = 0,
    iterations: int = 100,
) -> AnchorSet:
    """K-means under the 1 - IoU metric over normalized (w, h) box sizes.

    Input sizes are fractions of the image; centroids come back in cell units
    of ``grid_hw`` and are sorted by area. Needs at least ``k`` boxes.
    """
    boxes = np.asarray([(w * grid_hw[1], h * grid_hw[0]) for w, h in wh_pairs], dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[0] < k:
        raise ValueError(f"need at least {k} boxes to fit {k} anchors, got {0 if boxes.ndim != 2 else boxes.shape[0]}")
    if np.any(boxes <= 0):
        raise ValueError("box sizes must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    centers = boxes[rng.choice(boxes.shape[0], size=k, replace=False)].copy()
    assign = np.full(boxes.shape[0], -1)
    for _ in range(iterations):
        dist = 1.0 - _wh_iou_matrix(boxes, centers)
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for ci in range(k):
            members = boxes[assign == ci]
            if len(members):
                centers[ci] = members.mean(axis=0)
            else:  # re-seed an empty cluster on the worst-fit box
                centers[ci] = boxes[dist.min(axis=1).argmax()]
    order = np.lexsort((centers[:, 0], centers[:, 0] * centers[:, 1]))
    centers = centers[order]
    return AnchorSet(tuple((float(w), float(h)) for w, h in centers), base_grid=grid_hw)
