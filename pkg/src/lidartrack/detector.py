"""Encoder-free transformer detector for point clouds.

Pipeline: pillar encoder (per-point linear + ReLU, max-pool per BEV cell) with
sine/cosine cell encodings as decoder memory; farthest-point-sampled anchors
encoded with random Fourier features and a two-layer FFN as object queries;
a post-norm transformer decoder; and a box head that regresses offsets from
each query's anchor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_BOX_PARAMS = 9  # dx, dy, dz, w, l, h, yaw, vx, vy
POINT_FEATURES = 5
OBJECT_QUERY = "object"
TRACK_QUERY = "track"


class EmptyInputError(ValueError):
    pass


@dataclass
class DetectorConfig:
    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    cell_size: float = 1.0
    max_points_per_pillar: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    n_queries: int = 20
    n_classes: int = 1
    fourier_sigma: float = 1.0
    pe_temperature: float = 10000.0
    grid_conv: bool = False
    dropout: float = 0.0
    # initialisation only; no effect on the forward computation
    pillar_init_gain: float = 5.0
    query_init: str = "positional"  # or "random"
    query_attention_scale: float = 1.3
    # add the anchor's query encoding to track latents before decoding
    track_anchor_encoding: bool = False

    def __post_init__(self):
        self.x_range = tuple(self.x_range)
        self.y_range = tuple(self.y_range)

    def validate(self) -> "DetectorConfig":
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4")
        ad.AttentionConfig(self.d_model, self.n_heads)
        if self.n_queries < 0 or self.n_layers < 1:
            raise ValueError("n_queries must be >= 0 and n_layers >= 1")
        if self.query_init not in ("positional", "random"):
            raise ValueError(f"query_init must be 'positional' or 'random', got {self.query_init!r}")
        if self.pillar_init_gain <= 0 or self.fourier_sigma <= 0 or self.pe_temperature <= 1:
            raise ValueError("pillar_init_gain and fourier_sigma must be > 0, pe_temperature > 1")
        return self

    @property
    def grid_shape(self) -> tuple[int, int]:
        nx = int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))
        ny = int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))
        return nx, ny

    @property
    def n_outputs(self) -> int:
        return N_BOX_PARAMS + self.n_classes + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectorConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**obj).validate()


@dataclass
class DetectorParams:
    cfg: DetectorConfig
    params: dict[str, Tensor]
    fourier_b: np.ndarray  # (d/2, 3), never trained
    trained_steps: int = 0

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"detector.{k}": v.data.copy() for k, v in self.params.items()}
        out["detector.fourier_b"] = self.fourier_b.copy()
        return out

    @classmethod
    def from_arrays(cls, cfg: DetectorConfig, arrays: dict[str, np.ndarray]) -> "DetectorParams":
        params = {k[len("detector."):]: Tensor(v.copy(), requires_grad=True, name=k)
                  for k, v in arrays.items() if k.startswith("detector.") and k != "detector.fourier_b"}
        return cls(cfg, params, arrays["detector.fourier_b"].copy())

    def copy(self) -> "DetectorParams":
        out = DetectorParams.from_arrays(self.cfg, self.arrays())
        out.trained_steps = self.trained_steps
        return out


def init_detector(cfg: DetectorConfig, seed: int = 0) -> DetectorParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.ffn_dim
    p: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out):
        p[f"{name}.w"] = ad.glorot(rng, n_in, n_out)
        p[f"{name}.b"] = np.zeros(n_out)

    def ln(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    lin("pillar", POINT_FEATURES, d)
    p["pillar.w"] *= cfg.pillar_init_gain
    if cfg.grid_conv:
        for k in range(9):
            p[f"pillar.conv{k}.w"] = ad.glorot(rng, d, d) / 3.0
        p["pillar.conv.b"] = np.zeros(d)
    lin("query.l1", d, d)
    lin("query.l2", d, d)
    for layer in range(cfg.n_layers):
        for block in ("self", "cross"):
            for proj in ("q", "k", "v", "o"):
                lin(f"dec{layer}.{block}.{proj}", d, d)
        lin(f"dec{layer}.ffn.l1", d, f)
        lin(f"dec{layer}.ffn.l2", f, d)
        for n in ("ln1", "ln2", "ln3"):
            ln(f"dec{layer}.{n}")
    lin("head.l1", d, d)
    lin("head.l2", d, cfg.n_outputs)
    p["head.l2.b"][3:6] = (1.9, 4.4, 1.6)  # typical car size as starting point

    b = rng.normal(0.0, cfg.fourier_sigma, size=(d // 2, 3))
    if cfg.query_init == "positional":
        _positional_query_init(cfg, p, b, rng)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
    return DetectorParams(cfg, params, b)


def _positional_query_init(cfg: DetectorConfig, p: dict, b: np.ndarray, rng, n: int = 4000) -> None:
    """Start object queries out pointing at the memory cells under their anchors.

    The query FFN output layer is ridge-fitted so that the encoded anchor
    reproduces the cell encoding of its own BEV position, and the first
    cross-attention q/k projections are set to a scaled permutation that
    gives every head a share of both row and column frequencies.
    """
    d = cfg.d_model
    rho = np.column_stack([rng.uniform(*cfg.x_range, n), rng.uniform(*cfg.y_range, n), rng.uniform(0.0, 2.0, n)])
    hidden = np.maximum(fourier_features(rho, b) @ p["query.l1.w"] + p["query.l1.b"], 0.0)
    rows = (rho[:, 0] - cfg.x_range[0]) / cfg.cell_size - 0.5
    cols = (rho[:, 1] - cfg.y_range[0]) / cfg.cell_size - 0.5
    target = positional_encoding(rows, cols, d, cfg.pe_temperature)
    a = np.column_stack([hidden, np.ones(n)])
    w = np.linalg.solve(a.T @ a + 1e-3 * np.eye(a.shape[1]), a.T @ target)
    p["query.l2.w"] = w[:-1].copy()
    p["query.l2.b"] = w[-1].copy()

    half, pairs, h = d // 2, d // 4, cfg.n_heads
    order: list[int] = []
    for head in range(h):
        mine = range(head, pairs, h)
        order += [j for i in mine for j in (2 * i, 2 * i + 1)]
        order += [half + j for i in mine for j in (2 * i, 2 * i + 1)]
    perm = np.zeros((d, d))
    perm[order, np.arange(d)] = 1.0
    p["dec0.cross.q.w"] = cfg.query_attention_scale * perm
    p["dec0.cross.k.w"] = cfg.query_attention_scale * perm.copy()


# ---------------------------------------------------------------- backbone


@dataclass
class MemoryTokens:
    features: Tensor  # (P, d) with positional encoding added
    cells: np.ndarray  # (P, 2) integer (row, col)
    dropped_points: int = 0


def positional_encoding_1d(pos, width: int, temperature: float = 10000.0) -> np.ndarray:
    """Interleaved (sin, cos) pairs over a geometric frequency schedule."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1)
    i = np.arange(width // 2)
    freq = temperature ** (-2.0 * i / width)
    ang = pos[:, None] * freq[None, :]
    out = np.empty((len(pos), width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def positional_encoding(rows, cols, d_model: int, temperature: float = 10000.0) -> np.ndarray:
    """Grid-cell encoding: first half encodes the row, second half the column."""
    if d_model % 4:
        raise ValueError("d_model must be divisible by 4")
    half = d_model // 2
    return np.concatenate([positional_encoding_1d(rows, half, temperature),
                           positional_encoding_1d(cols, half, temperature)], axis=1)


def _cell_index(points: np.ndarray, cfg: DetectorConfig):
    nx, ny = cfg.grid_shape
    ix = np.floor((points[:, 0] - cfg.x_range[0]) / cfg.cell_size).astype(np.int64)
    iy = np.floor((points[:, 1] - cfg.y_range[0]) / cfg.cell_size).astype(np.int64)
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    return ix, iy, inside


def in_grid(points: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points[_cell_index(points, cfg)[2]]


def pillarize(points: np.ndarray, cfg: DetectorConfig, dp: DetectorParams) -> MemoryTokens:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ix, iy, inside = _cell_index(points, cfg)
    dropped = int((~inside).sum())
    pts, ix, iy = points[inside], ix[inside], iy[inside]
    if len(pts) == 0:
        raise EmptyInputError("no points inside the pillar grid")
    nx, ny = cfg.grid_shape
    cell = ix * ny + iy
    order = np.argsort(cell, kind="stable")
    cell_sorted = cell[order]
    starts = np.flatnonzero(np.r_[True, cell_sorted[1:] != cell_sorted[:-1]])
    rank = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    keep = order[rank < cfg.max_points_per_pillar]
    keep.sort()
    pts, ix, iy, cell = pts[keep], ix[keep], iy[keep], cell[keep]

    uniq, seg = np.unique(cell, return_inverse=True)
    cx = cfg.x_range[0] + (ix + 0.5) * cfg.cell_size
    cy = cfg.y_range[0] + (iy + 0.5) * cfg.cell_size
    hx = (cfg.x_range[1] - cfg.x_range[0]) / 2
    hy = (cfg.y_range[1] - cfg.y_range[0]) / 2
    feats = np.column_stack([
        (pts[:, 0] - (cfg.x_range[0] + hx)) / hx,
        (pts[:, 1] - (cfg.y_range[0] + hy)) / hy,
        pts[:, 2] / 2.0,
        (pts[:, 0] - cx) / cfg.cell_size,
        (pts[:, 1] - cy) / cfg.cell_size,
    ])
    p = dp.params
    h = ad.relu(ad.linear(Tensor(feats), p["pillar.w"], p["pillar.b"]))
    pooled = ad.segment_max(h, seg, len(uniq))
    rows, cols = uniq // ny, uniq % ny
    if cfg.grid_conv:
        lookup = {int(c): i for i, c in enumerate(uniq)}
        acc = None
        k = 0
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nb = np.array([lookup.get(int((r + dr) * ny + (c + dc)), -1)
                               if 0 <= r + dr < nx and 0 <= c + dc < ny else -1
                               for r, c in zip(rows, cols)])
                term = ad.linear(ad.gather_rows_padded(pooled, nb), p[f"pillar.conv{k}.w"])
                acc = term if acc is None else ad.add(acc, term)
                k += 1
        pooled = ad.relu(ad.add(acc, p["pillar.conv.b"]))
    pe = positional_encoding(rows, cols, cfg.d_model, cfg.pe_temperature)
    return MemoryTokens(ad.add(pooled, Tensor(pe)), np.column_stack([rows, cols]), dropped)


# ---------------------------------------------------------------- queries


def fps(points: np.ndarray, m: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Indices of ``m`` farthest-point samples (max-min distance selection)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise EmptyInputError("farthest point sampling on an empty cloud")
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = [start]
    dist = ((points - points[start]) ** 2).sum(axis=1)
    for _ in range(min(m, n) - 1):
        nxt = int(np.argmax(dist))
        if dist[nxt] <= 0.0:
            break  # only duplicates of selected points remain
        chosen.append(nxt)
        dist = np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return np.asarray(chosen, dtype=np.int64)


def fourier_features(anchors: np.ndarray, b: np.ndarray) -> np.ndarray:
    proj = np.asarray(anchors, dtype=np.float64).reshape(-1, 3) @ b.T
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


def encode_queries(anchors: np.ndarray, dp: DetectorParams) -> Tensor:
    """Object-query tokens ``FFN([sin(B rho), cos(B rho)])`` for each anchor row."""
    p = dp.params
    x = Tensor(fourier_features(anchors, dp.fourier_b))
    h = ad.relu(ad.linear(x, p["query.l1.w"], p["query.l1.b"]))
    return ad.linear(h, p["query.l2.w"], p["query.l2.b"])


@dataclass
class QueryToken:
    vector: np.ndarray
    anchor: np.ndarray
    origin: str = OBJECT_QUERY
    track_id: int | None = None


def fourier_encode(anchor, dp: DetectorParams) -> QueryToken:
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    return QueryToken(encode_queries(anchor[None], dp).data[0], anchor, OBJECT_QUERY)


# ---------------------------------------------------------------- decoder


@dataclass
class DecoderOutput:
    tokens: Tensor
    cross_attention: list[np.ndarray] = field(default_factory=list)  # per layer, (Q, N)


def _mha(xq: Tensor, xkv: Tensor, p: dict, prefix: str, n_heads: int, weights_out=None) -> Tensor:
    q = ad.linear(xq, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
    k = ad.linear(xkv, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
    v = ad.linear(xkv, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
    o = ad.attention(q, k, v, n_heads, weights_out)
    return ad.linear(o, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])


def decode(queries: Tensor, memory: Tensor, dp: DetectorParams, record_attention: bool = False,
           rng: np.random.Generator | None = None) -> DecoderOutput:
    """Post-norm decoder: self-attention, cross-attention to memory, FFN."""
    cfg, p = dp.cfg, dp.params
    if queries.shape[-1] != cfg.d_model or memory.shape[-1] != cfg.d_model:
        raise ad.DimensionError(f"decode: widths {queries.shape[-1]}, {memory.shape[-1]} != {cfg.d_model}")
    if queries.shape[0] == 0:
        return DecoderOutput(queries, [])
    if memory.shape[0] == 0:
        raise EmptyInputError("decode: empty memory")
    x = queries
    maps = []
    drop = cfg.dropout if rng is not None else 0.0
    for layer in range(cfg.n_layers):
        pre = f"dec{layer}"
        sa = ad.dropout(_mha(x, x, p, f"{pre}.self", cfg.n_heads), drop, rng)
        x = ad.layer_norm(ad.add(x, sa), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        buf = [] if record_attention else None
        ca = ad.dropout(_mha(x, memory, p, f"{pre}.cross", cfg.n_heads, buf), drop, rng)
        if record_attention:
            maps.append(buf[0].mean(axis=0))
        x = ad.layer_norm(ad.add(x, ca), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h = ad.relu(ad.linear(x, p[f"{pre}.ffn.l1.w"], p[f"{pre}.ffn.l1.b"]))
        ff = ad.dropout(ad.linear(h, p[f"{pre}.ffn.l2.w"], p[f"{pre}.ffn.l2.b"]), drop, rng)
        x = ad.layer_norm(ad.add(x, ff), p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
    return DecoderOutput(x, maps)


# ---------------------------------------------------------------- head


def head_forward(tokens: Tensor, dp: DetectorParams) -> Tensor:
    """Raw head output per token: 9 box values followed by C+1 class logits."""
    p = dp.params
    h = ad.relu(ad.linear(tokens, p["head.l1.w"], p["head.l1.b"]))
    return ad.linear(h, p["head.l2.w"], p["head.l2.b"])


@dataclass
class BoxEstimate:
    anchor: np.ndarray
    offset: np.ndarray
    size: np.ndarray
    heading: float
    velocity: np.ndarray
    class_probs: np.ndarray  # C real classes followed by no-object
    origin: str = OBJECT_QUERY
    track_id: int | None = None

    @property
    def location(self) -> np.ndarray:
        return self.anchor + self.offset

    @property
    def confidence(self) -> float:
        return float(self.class_probs[:-1].max())

    @property
    def cls(self) -> int:
        return int(np.argmax(self.class_probs[:-1]))

    def params(self) -> np.ndarray:
        """(x, y, z, w, l, h, yaw, vx, vy) with the location resolved."""
        return np.concatenate([self.location, self.size, [self.heading], self.velocity])


def boxes_from_raw(raw: np.ndarray, anchors: np.ndarray, origins=None, track_ids=None) -> list[BoxEstimate]:
    raw = np.asarray(raw, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    probs = ad.softmax_array(raw[:, N_BOX_PARAMS:]) if len(raw) else raw
    out = []
    for i in range(len(raw)):
        r = raw[i]
        out.append(BoxEstimate(anchors[i].copy(), r[0:3].copy(), r[3:6].copy(),
                               float(ad.wrap_angle(r[6])), r[7:9].copy(), probs[i].copy(),
                               origins[i] if origins is not None else OBJECT_QUERY,
                               track_ids[i] if track_ids is not None else None))
    return out


def detection_head(token, anchor, dp: DetectorParams) -> BoxEstimate:
    tok = token if isinstance(token, Tensor) else Tensor(np.asarray(token).reshape(1, -1))
    raw = head_forward(tok, dp).data
    return boxes_from_raw(raw[:1], np.asarray(anchor).reshape(1, 3))[0]


# ---------------------------------------------------------------- full forward


@dataclass
class ForwardResult:
    memory: MemoryTokens
    anchors: np.ndarray  # (Q, 3): track anchors first, then object anchors
    n_track: int
    decoded: DecoderOutput
    raw: Tensor  # (Q, n_outputs)

    @property
    def n_object(self) -> int:
        return len(self.anchors) - self.n_track


def frame_seed(seed: int, index: int) -> int:
    return int((seed * 1_000_003 + index * 7_919) % (2 ** 32))


def forward(points: np.ndarray, dp: DetectorParams, seed: int = 0, track_tokens: Tensor | None = None,
            track_anchors: np.ndarray | None = None, record_attention: bool = False,
            n_queries: int | None = None, rng: np.random.Generator | None = None) -> ForwardResult:
    """Backbone, sampling, query encoding, decoder and head for one frame."""
    cfg = dp.cfg
    m = cfg.n_queries if n_queries is None else n_queries
    pts = in_grid(points, cfg)
    memory = pillarize(pts, cfg, dp)
    idx = fps(pts, m, seed) if m > 0 else np.zeros(0, dtype=np.int64)
    obj_anchors = pts[idx]
    parts = []
    anchors = []
    n_track = 0
    if track_tokens is not None and track_tokens.shape[0] > 0:
        t_anchors = np.asarray(track_anchors, dtype=np.float64).reshape(-1, 3)
        if cfg.track_anchor_encoding:
            track_tokens = ad.add(track_tokens, encode_queries(t_anchors, dp))
        parts.append(track_tokens)
        anchors.append(t_anchors)
        n_track = track_tokens.shape[0]
    if len(obj_anchors):
        parts.append(encode_queries(obj_anchors, dp))
        anchors.append(obj_anchors)
    all_anchors = np.concatenate(anchors) if anchors else np.zeros((0, 3))
    if not parts:
        empty = Tensor(np.zeros((0, cfg.d_model)))
        return ForwardResult(memory, all_anchors, 0, DecoderOutput(empty), Tensor(np.zeros((0, cfg.n_outputs))))
    queries = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
    decoded = decode(queries, memory.features, dp, record_attention, rng)
    raw = head_forward(decoded.tokens, dp)
    return ForwardResult(memory, all_anchors, n_track, decoded, raw)


def detect(points, dp: DetectorParams, seed: int = 0, n_queries: int | None = None) -> list[BoxEstimate]:
    """Standalone detector path: all query estimates, unthresholded."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if n_queries == 0 or (n_queries is None and dp.cfg.n_queries == 0):
        return []
    res = forward(pts, dp, seed, n_queries=n_queries)
    return boxes_from_raw(res.raw.data, res.anchors)
