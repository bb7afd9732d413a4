"""Encoder, coarse head, gate units and refinement units for both decoder variants.

``variant="lrn"`` feeds raw skip features into each refinement unit;
``variant="gfrnet"`` gates them first.

Indexing: the encoder yields ``f_1 .. f_D`` with ``f_s`` at ``1/2**s`` of the
input resolution. The coarse map comes from ``f_D``. Refinement unit ``k``
(``k = 1 .. D-2``) upsamples the previous map and fuses it with ``f_{D-k}``;
in the gated variant that skip first passes a gate steered by ``f_{D-k+1}``.
``f_1`` is never consumed. ``skip_offset`` shifts every skip one encoder stage shallower
(max-pooling the fused feature back to the decoder resolution).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Graph, Node
from .tensor import derive_rng, get_dtype, xavier_init

VARIANTS = ("lrn", "gfrnet")
GATE_MODES = ("mul", "add")


@dataclass
class ArchConfig:
    depth: int = 5
    stage_channels: tuple = (8, 16, 16, 32, 32)
    num_classes: int = 4
    gate_channels: int | None = None
    variant: str = "gfrnet"
    gate_mode: str = "mul"
    in_channels: int = 3
    skip_offset: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    def validate(self):
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if len(self.stage_channels) != self.depth:
            raise ValueError(f"stage_channels needs {self.depth} entries, got {len(self.stage_channels)}")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.gate_channels is not None and self.gate_channels < 1:
            raise ValueError("gate_channels must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.skip_offset not in (0, 1):
            raise ValueError("skip_offset must be 0 or 1")

    @property
    def num_refinements(self) -> int:
        return self.depth - 2

    @property
    def num_stages(self) -> int:
        return self.depth - 1

    def skip_stage(self, k: int) -> int:
        """Encoder stage feeding refinement unit ``k`` (1-based)."""
        return self.depth - k - self.skip_offset

    def gate_width(self, k: int) -> int:
        if self.gate_channels is not None:
            return self.gate_channels
        return self.stage_channels[self.skip_stage(k) - 1]

    def check_input(self, h: int, w: int):
        q = 2 ** self.depth
        if h % q or w % q:
            raise ValueError(f"input {h}x{w} is not divisible by 2**depth = {q}; "
                             f"crop or pad to a multiple of {q}")

    def to_json(self) -> str:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls(**json.loads(text))


def _conv_shapes(config: ArchConfig):
    """Ordered (prefix, c_out, c_in, has_bn) for every conv in the model."""
    ch = config.stage_channels
    C = config.num_classes
    out = []
    for s in range(1, config.depth + 1):
        c_in = config.in_channels if s == 1 else ch[s - 2]
        out.append((f"enc{s}.conv1", ch[s - 1], c_in, True))
        out.append((f"enc{s}.conv2", ch[s - 1], ch[s - 1], True))
    out.append(("head", C, ch[-1], False))
    for k in range(1, config.num_refinements + 1):
        j = config.skip_stage(k)
        if config.variant == "gfrnet":
            cg = config.gate_width(k)
            out.append((f"gate{k}.shallow", cg, ch[j - 1], True))
            out.append((f"gate{k}.deep", cg, ch[j], True))
            out.append((f"ru{k}.mconv", C, cg, True))
            out.append((f"ru{k}.out", C, 2 * C, False))
        else:
            out.append((f"ru{k}.out", C, C + ch[j - 1], False))
    return out


def bn_name(conv_prefix: str) -> str:
    # enc1.conv1 -> enc1.bn1, gate1.shallow -> gate1.shallow.bn, ru1.mconv -> ru1.mbn
    if ".conv" in conv_prefix:
        return conv_prefix.replace(".conv", ".bn")
    if conv_prefix.endswith(".mconv"):
        return conv_prefix[: -len("mconv")] + "mbn"
    return conv_prefix + ".bn"


@dataclass
class ModelParams:
    """Named learnable arrays plus per-layer batch-norm running statistics."""

    arrays: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)

    def names(self):
        return list(self.arrays)

    def set_mode(self, mode: str):
        for st in self.bn.values():
            st.mode = mode

    def copy(self) -> "ModelParams":
        bn = {k: BatchNormState(st.channels, st.eps, st.momentum, st.mode,
                                st.running_mean.copy(), st.running_var.copy())
              for k, st in self.bn.items()}
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, bn)

    def state_items(self):
        """Every named array that a checkpoint must carry, in a fixed order."""
        for name, arr in self.arrays.items():
            yield name, arr
        for name, st in self.bn.items():
            yield f"{name}.running_mean", st.running_mean
            yield f"{name}.running_var", st.running_var


def init_params(config: ArchConfig, seed: int) -> ModelParams:
    """Xavier-uniform conv weights, zero biases, unit/zero batch-norm affine.

    Every tensor draws from its own stream keyed by ``(seed, name)``, so two
    configs that share a layer name and shape (e.g. the encoder of the gated
    and ungated variants) start from identical weights.
    """
    dt = get_dtype()
    p = ModelParams()
    for prefix, c_out, c_in, has_bn in _conv_shapes(config):
        rng = derive_rng(seed, prefix + ".w")
        p.arrays[prefix + ".w"] = xavier_init(c_in * 9, c_out * 9, (c_out, c_in, 3, 3), rng)
        p.arrays[prefix + ".b"] = np.zeros(c_out, dtype=dt)
        if has_bn:
            bn = bn_name(prefix)
            p.arrays[bn + ".gamma"] = np.ones(c_out, dtype=dt)
            p.arrays[bn + ".beta"] = np.zeros(c_out, dtype=dt)
            p.bn[bn] = BatchNormState(c_out, config.bn_eps, config.bn_momentum)
    return p


class Bound:
    """ModelParams attached to one graph; leaves are created on first use."""

    def __init__(self, params: ModelParams, graph: Graph):
        self.params = params
        self.graph = graph
        self.leaves: dict[str, Node] = {}

    def __getitem__(self, name: str) -> Node:
        node = self.leaves.get(name)
        if node is None:
            node = self.graph.leaf(self.params.arrays[name], name)
            self.leaves[name] = node
        return node

    def conv(self, prefix: str, x: Node) -> Node:
        return ad.conv3x3(x, self[prefix + ".w"], self[prefix + ".b"])

    def conv_bn(self, prefix: str, x: Node) -> Node:
        bn = bn_name(prefix)
        return ad.batchnorm(self.conv(prefix, x), self[bn + ".gamma"], self[bn + ".beta"], self.params.bn[bn])

    def grads(self) -> dict:
        """Gradient for every parameter; exact zeros for parameters never reached."""
        out = {}
        for name, arr in self.params.arrays.items():
            node = self.leaves.get(name)
            out[name] = np.zeros_like(arr) if node is None else self.graph.grad_of(node)
        return out


def encode(x: Node, P: Bound, config: ArchConfig) -> list:
    _, c, h, w = x.shape
    if c != config.in_channels:
        raise ValueError(f"image has {c} channels, config expects {config.in_channels}")
    config.check_input(h, w)
    feats = []
    for s in range(1, config.depth + 1):
        x = ad.relu(P.conv_bn(f"enc{s}.conv1", x))
        x = ad.relu(P.conv_bn(f"enc{s}.conv2", x))
        x = ad.maxpool2x2(x)
        feats.append(x)
    return feats


def coarse_head(f_top: Node, P: Bound) -> Node:
    return P.conv("head", f_top)


def gate_branches(f_shallow: Node, f_deep: Node, P: Bound, k: int):
    """Transformed inputs (u, v) of gate ``k``; v is upsampled to u's resolution."""
    hs, ws = f_shallow.shape[2:]
    hd, wd = f_deep.shape[2:]
    if (2 * hd, 2 * wd) != (hs, ws):
        raise ValueError(f"gate {k}: deep input {hd}x{wd} must be half of shallow {hs}x{ws}")
    u = ad.relu(P.conv_bn(f"gate{k}.shallow", f_shallow))
    v = ad.bilinear_up2x(ad.relu(P.conv_bn(f"gate{k}.deep", f_deep)))
    return u, v


def gate_unit(f_shallow: Node, f_deep: Node, P: Bound, k: int, mode: str = "mul") -> Node:
    u, v = gate_branches(f_shallow, f_deep, P, k)
    return ad.gate_combine(u, v, mode)


def gated_refinement_unit(r_prev: Node, gated: Node, P: Bound, k: int) -> Node:
    if r_prev.shape[2:] != gated.shape[2:]:
        raise ValueError(f"RU{k}: label map {r_prev.shape[2:]} and gated map {gated.shape[2:]} differ spatially")
    m = P.conv_bn(f"ru{k}.mconv", gated)
    return P.conv(f"ru{k}.out", ad.concat_channels(m, r_prev))


def lrn_refinement_unit(r_prev: Node, f_skip: Node, P: Bound, k: int) -> Node:
    if r_prev.shape[2:] != f_skip.shape[2:]:
        raise ValueError(f"RU{k}: label map {r_prev.shape[2:]} and skip {f_skip.shape[2:]} differ spatially")
    return P.conv(f"ru{k}.out", ad.concat_channels(r_prev, f_skip))


@dataclass
class StageOutputs:
    coarse: Node
    refined: list
    features: list
    gates: list
    bound: Bound

    @property
    def maps(self) -> list:
        return [self.coarse, *self.refined]

    def arrays(self) -> list:
        return [m.value for m in self.maps]


def forward(image, params: ModelParams, config: ArchConfig, graph: Graph | None = None) -> StageOutputs:
    graph = graph or Graph()
    P = Bound(params, graph)
    x = graph.leaf(np.asarray(image, dtype=get_dtype()), "image")
    feats = encode(x, P, config)
    coarse = coarse_head(feats[-1], P)
    prev = coarse
    refined, gates = [], []
    for k in range(1, config.num_refinements + 1):
        j = config.skip_stage(k)
        r_up = ad.bilinear_up2x(prev)
        if config.variant == "gfrnet":
            m_f = gate_unit(feats[j - 1], feats[j], P, k, config.gate_mode)
            for _ in range(config.skip_offset):
                m_f = ad.maxpool2x2(m_f)
            gates.append(m_f)
            prev = gated_refinement_unit(r_up, m_f, P, k)
        else:
            skip = feats[j - 1]
            for _ in range(config.skip_offset):
                skip = ad.maxpool2x2(skip)
            prev = lrn_refinement_unit(r_up, skip, P, k)
        refined.append(prev)
    return StageOutputs(coarse, refined, feats, gates, P)


def upsample_to(scores: np.ndarray, h: int, w: int) -> np.ndarray:
    """Repeated 2x bilinear upsampling of an (n, C, h', w') score array to (h, w)."""
    out = scores
    while out.shape[2] < h or out.shape[3] < w:
        uh = ad.upsample_matrix(out.shape[2], out.dtype.type)
        uw = ad.upsample_matrix(out.shape[3], out.dtype.type)
        out = uh @ out @ uw.T
    if out.shape[2:] != (h, w):
        raise ValueError(f"cannot reach {h}x{w} from {scores.shape[2:]} by doubling")
    return out


def labels_from_scores(scores: np.ndarray, h: int, w: int) -> np.ndarray:
    """Upsample to (h, w) and take the per-pixel argmax (ties -> lowest class)."""
    return upsample_to(scores, h, w).argmax(axis=1)


def infer(image, params: ModelParams, config: ArchConfig) -> np.ndarray:
    params.set_mode("infer")
    out = forward(image, params, config)
    h, w = np.shape(image)[2:]
    return labels_from_scores(out.refined[-1].value, h, w)
