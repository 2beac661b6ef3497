"""Node classifiers built on the autodiff tape: MLP, SGC, GCN, snowball and the
adaptive channel mixing (ACM) family.

Parameters live in a plain ``dict[str, np.ndarray]`` between steps; each
forward pass registers them on a fresh :class:`~acmlab.autodiff.Tape`.
No layer has a bias term.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import FilterKind, FilterOperator, Graph, HighPassOf, make_filter, parse_kind
from .metrics import LabelEncoding

FAMILIES = (
    "mlp", "sgc", "gcn", "snowball",
    "acm_gcn", "acmii_gcn", "acm_sgc", "acm_gcn_plus", "acm_gcn_plusplus",
)
CHANNELS = ("lp", "hp", "identity", "structure")
ACM_FAMILIES = ("acm_gcn", "acmii_gcn", "acm_sgc", "acm_gcn_plus", "acm_gcn_plusplus")


@dataclass
class ModelSpec:
    family: str = "gcn"
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.0
    variant: int = 1
    channels: tuple = ("lp", "hp", "identity")
    use_mixing: bool = True
    temperature: float | None = None
    use_residual: bool = False
    filter_kind: str = "arw_hat"
    activation: str = "relu"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        if self.family == "acmii_gcn":
            self.variant = 2
        if self.family == "acm_gcn_plusplus":
            self.use_residual = True
        self.channels = tuple(self.channels)
        if self.variant not in (1, 2):
            raise ValueError("variant must be 1 (ACM) or 2 (ACMII)")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown channels {sorted(unknown)}")
        if self.family in ACM_FAMILIES:
            if not self.channels:
                raise ValueError("at least one channel must be enabled")
            if "lp" not in self.channels:
                raise ValueError("ACM models require the LP channel")
            if "structure" in self.channels and self.family not in ("acm_gcn_plus", "acm_gcn_plusplus"):
                raise ValueError("the structure channel is only available for the +/++ families")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.family == "acm_sgc" and self.layers != 1:
            raise ValueError("acm_sgc is a single-layer model (layers=1)")
        if self.layers < (0 if self.family == "snowball" else 1):
            raise ValueError("layers is too small")
        if self.activation not in ("relu", "linear"):
            raise ValueError("activation must be 'relu' or 'linear'")
        parse_kind(self.filter_kind)

    @property
    def is_acm(self) -> bool:
        return self.family in ACM_FAMILIES

    @property
    def uses_layer_norm(self) -> bool:
        return self.family in ("acm_gcn_plus", "acm_gcn_plusplus")

    @property
    def channel_order(self) -> tuple:
        return tuple(c for c in CHANNELS if c in self.channels)

    @property
    def effective_temperature(self) -> float:
        return float(self.temperature) if self.temperature is not None else float(len(self.channel_order))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class GraphData:
    """Everything a forward pass needs besides parameters."""

    graph: Graph
    x: np.ndarray
    labels: LabelEncoding
    lp: FilterOperator
    hp: FilterOperator
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, graph: Graph, x: np.ndarray, labels: LabelEncoding, filter_kind="arw_hat") -> "GraphData":
        kind = parse_kind(filter_kind) if isinstance(filter_kind, str) else filter_kind
        return cls(graph, np.asarray(x, dtype=np.float64), labels,
                   make_filter(graph, kind), make_filter(graph, HighPassOf(kind)))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def adjacency(self) -> sp.csr_matrix:
        if "adj" not in self._cache:
            self._cache["adj"] = self.graph.adjacency()
        return self._cache["adj"]

    def filtered_features(self, hops: int) -> np.ndarray:
        """``LP^hops X``, cached."""
        key = ("lp_x", hops)
        if key not in self._cache:
            from .graph import spmm

            m = self.x
            for _ in range(hops):
                m = spmm(self.lp, m)
            self._cache[key] = m
        return self._cache[key]


# ---------------------------------------------------------------------------
# Parameters


def glorot(shape, rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def _acm_layer_shapes(spec: ModelSpec, prefix: str, f_in: int, f_out: int, num_nodes: int | None) -> dict:
    shapes = {}
    chans = spec.channel_order
    for ch in chans:
        if ch == "structure":
            if num_nodes is None:
                raise ValueError("the structure channel needs num_nodes")
            shapes[f"{prefix}.W_structure"] = (num_nodes, f_out)
        else:
            shapes[f"{prefix}.W_{ch}"] = (f_in, f_out)
    for ch in chans:
        shapes[f"{prefix}.Wt_{ch}"] = (f_out, 1)
    if spec.use_mixing:
        shapes[f"{prefix}.W_mix"] = (len(chans), len(chans))
    if spec.uses_layer_norm:
        for ch in chans:
            shapes[f"{prefix}.ln_gamma_{ch}"] = (1, f_out)
            shapes[f"{prefix}.ln_beta_{ch}"] = (1, f_out)
    return shapes


def param_shapes(spec: ModelSpec, in_dim: int, num_classes: int, num_nodes: int | None = None) -> dict:
    """Ordered name -> shape map of every learnable tensor."""
    fam = spec.family
    if fam == "sgc":
        return {"l0.W": (in_dim, num_classes)}
    if fam == "acm_sgc":
        return _acm_layer_shapes(spec, "l0", in_dim, num_classes, num_nodes)
    if fam == "snowball":
        shapes, width = {}, in_dim
        for i in range(spec.layers):
            shapes[f"l{i}.W"] = (width, spec.hidden)
            width += spec.hidden
        shapes[f"l{spec.layers}.W"] = (width, num_classes)
        return shapes
    dims = [in_dim] + [spec.hidden] * (spec.layers - 1) + [num_classes]
    shapes = {}
    for i in range(spec.layers):
        if spec.is_acm:
            shapes.update(_acm_layer_shapes(spec, f"l{i}", dims[i], dims[i + 1], num_nodes))
        else:
            shapes[f"l{i}.W"] = (dims[i], dims[i + 1])
    if spec.use_residual and spec.layers > 1:
        shapes["W_X"] = (in_dim, spec.hidden)
    return shapes


_BACKBONE = ("W", "W_lp", "W_hp", "W_identity")


def _is_backbone(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _BACKBONE


def init_params(spec: ModelSpec, in_dim: int, num_classes: int, rng, num_nodes: int | None = None) -> dict:
    """Glorot-uniform weights; layer-norm gains start at 1 and offsets at 0.

    Filtered-channel weights are drawn from ``rng`` layer by layer; every
    other weight comes from a child stream spawned off ``rng``, which leaves
    ``rng``'s own sequence untouched. An LP-only ACM model therefore starts
    from the same backbone weights, and sees the same dropout masks, as the
    GCN with the same seed.
    """
    shapes = param_shapes(spec, in_dim, num_classes, num_nodes)
    params = {name: glorot(shape, rng) for name, shape in shapes.items() if _is_backbone(name)}
    aux = rng.spawn(1)[0]
    for name, shape in shapes.items():
        if name in params:
            continue
        if ".ln_gamma_" in name:
            params[name] = np.ones(shape)
        elif ".ln_beta_" in name:
            params[name] = np.zeros(shape)
        else:
            params[name] = glorot(shape, aux)
    return {name: params[name] for name in shapes}


def param_count(spec: ModelSpec, in_dim: int, num_classes: int, num_nodes: int | None = None) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec, in_dim, num_classes, num_nodes).values())


def layer_param_count(spec: ModelSpec, f_in: int, f_out: int, num_nodes: int | None = None) -> int:
    """Learnable parameters of a single layer of ``spec``'s family."""
    if spec.is_acm:
        return sum(int(np.prod(s)) for s in _acm_layer_shapes(spec, "l", f_in, f_out, num_nodes).values())
    return f_in * f_out


# ---------------------------------------------------------------------------
# Forward passes


def _act(spec: ModelSpec, output: bool) -> Callable[[ad.Tensor], ad.Tensor]:
    if output or spec.activation == "linear":
        return lambda t: t
    return ad.relu


def forward_sgc(hops: int, f: FilterOperator, x: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
    """Logits ``F^hops X W``."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    h = x
    for _ in range(hops):
        h = ad.spmm_fixed(f, h)
    return ad.matmul(h, w)


def forward_gcn(spec: ModelSpec, data: GraphData, p: dict, rng, training: bool) -> ad.Tensor:
    """Stack of ``act(F H W)`` layers; the last one is linear."""
    h = p["_x"]
    for i in range(spec.layers):
        h = ad.dropout(h, spec.dropout, rng, training)
        h = ad.spmm_fixed(data.lp, ad.matmul(h, p[f"l{i}.W"]))
        h = _act(spec, i == spec.layers - 1)(h)
    return h


def forward_mlp(spec: ModelSpec, data: GraphData, p: dict, rng, training: bool) -> ad.Tensor:
    h = p["_x"]
    for i in range(spec.layers):
        h = ad.dropout(h, spec.dropout, rng, training)
        h = _act(spec, i == spec.layers - 1)(ad.matmul(h, p[f"l{i}.W"]))
    return h


def forward_snowball(spec: ModelSpec, data: GraphData, p: dict, rng, training: bool) -> ad.Tensor:
    """Each layer filters the column-concatenation of the input and all
    earlier hidden outputs."""
    outputs = [p["_x"]]
    for i in range(spec.layers + 1):
        h = outputs[0] if len(outputs) == 1 else ad.concat_cols(outputs)
        h = ad.dropout(h, spec.dropout, rng, training)
        h = ad.spmm_fixed(data.lp, ad.matmul(h, p[f"l{i}.W"]))
        if i == spec.layers:
            return h
        outputs.append(_act(spec, False)(h))


def acm_layer(h: ad.Tensor, lp: FilterOperator, hp: FilterOperator, p: dict, prefix: str, spec: ModelSpec,
              output: bool = False, adjacency=None) -> tuple[ad.Tensor, np.ndarray]:
    """One adaptive channel mixing layer.

    Step 1 extracts one feature map per enabled channel (variant 1 filters
    before the nonlinearity, variant 2 after it). Step 2 turns each map into a
    per-node score, ``sigmoid(H_c Wt_c)`` (after layer norm for the +/++
    families), and mixes the scores into row-wise softmax weights. Step 3
    sums the channel maps weighted per node. In the output layer every ReLU is
    dropped so logits stay unbounded.

    Returns the layer output and the ``N x k`` mixing weights.
    """
    act = _act(spec, output)
    filters = {"lp": lp, "hp": hp, "identity": None}
    feats = []
    for ch in spec.channel_order:
        if ch == "structure":
            w = p[f"{prefix}.W_structure"]
            hc = act(ad.dense_rows_matmul(lambda: adjacency, w))
        else:
            hw = ad.matmul(h, p[f"{prefix}.W_{ch}"])
            f = filters[ch]
            if spec.variant == 1:
                hc = act(hw if f is None else ad.spmm_fixed(f, hw))
            else:
                hw = act(hw)
                hc = hw if f is None else ad.spmm_fixed(f, hw)
        feats.append(hc)

    scores = []
    for ch, hc in zip(spec.channel_order, feats):
        src = hc
        if spec.uses_layer_norm:
            src = ad.layer_norm(hc, p[f"{prefix}.ln_gamma_{ch}"], p[f"{prefix}.ln_beta_{ch}"])
        scores.append(ad.sigmoid(ad.matmul(src, p[f"{prefix}.Wt_{ch}"])))
    stacked = scores[0] if len(scores) == 1 else ad.concat_cols(scores)
    temp = spec.effective_temperature
    if spec.use_mixing:
        alpha = ad.row_softmax(ad.matmul(ad.scale(stacked, 1.0 / temp), p[f"{prefix}.W_mix"]))
    else:
        alpha = ad.row_softmax(stacked, temp)

    out = None
    for i, hc in enumerate(feats):
        term = ad.row_scale(hc, ad.column(alpha, i) if len(feats) > 1 else alpha)
        out = term if out is None else ad.add(out, term)
    return act(out), alpha.value


def acm_plus_layer(h, lp, hp, p, prefix, spec, output=False, adjacency=None):
    """ACM layer with layer-normalized mixing scores and an optional structure
    channel ``act(A W_A)``; ``spec`` must be a +/++ family."""
    if not spec.uses_layer_norm:
        raise ValueError("acm_plus_layer needs an acm_gcn_plus or acm_gcn_plusplus spec")
    return acm_layer(h, lp, hp, p, prefix, spec, output, adjacency)


def forward_acm(spec: ModelSpec, data: GraphData, p: dict, rng, training: bool):
    x = p["_x"]
    h = x
    alphas = []
    residual = None
    if spec.use_residual and spec.layers > 1:
        residual = _act(spec, False)(ad.matmul(x, p["W_X"]))
    adjacency = data.adjacency if "structure" in spec.channels else None
    for i in range(spec.layers):
        last = i == spec.layers - 1
        h = ad.dropout(h, spec.dropout, rng, training)
        h, alpha = acm_layer(h, data.lp, data.hp, p, f"l{i}", spec, output=last, adjacency=adjacency)
        alphas.append(alpha)
        if residual is not None and not last:
            h = ad.add(h, residual)
    return h, alphas


def acm_plusplus_forward(spec: ModelSpec, data: GraphData, p: dict, rng, training: bool):
    """ACM+ stack with the residual branch ``act(X W_X)`` added to every hidden
    layer output."""
    if spec.family != "acm_gcn_plusplus":
        raise ValueError("acm_plusplus_forward needs an acm_gcn_plusplus spec")
    return forward_acm(spec, data, p, rng, training)


def forward(spec: ModelSpec, data: GraphData, tensors: dict, rng=None, training: bool = False):
    """Logits for every node plus the per-layer mixing weights (ACM only).

    ``tensors`` maps parameter names to tape tensors; the input features are
    taken from ``data`` unless ``tensors`` carries an ``"_x"`` entry.
    """
    p = dict(tensors)
    tape = next(iter(tensors.values())).tape if tensors else ad.Tape()
    fam = spec.family
    if "_x" not in p:
        if fam == "sgc":
            p["_x"] = tape.const(data.filtered_features(spec.layers))
        else:
            p["_x"] = tape.const(data.x)
    if rng is None:
        rng = np.random.default_rng(0)
    if fam == "sgc":
        h = ad.dropout(p["_x"], spec.dropout, rng, training)
        return ad.matmul(h, p["l0.W"]), []
    if fam == "mlp":
        return forward_mlp(spec, data, p, rng, training), []
    if fam == "gcn":
        return forward_gcn(spec, data, p, rng, training), []
    if fam == "snowball":
        return forward_snowball(spec, data, p, rng, training), []
    if fam == "acm_sgc":
        h = ad.dropout(p["_x"], spec.dropout, rng, training)
        logits, alpha = acm_layer(h, data.lp, data.hp, p, "l0", spec, output=True,
                                  adjacency=data.adjacency if "structure" in spec.channels else None)
        return logits, [alpha]
    return forward_acm(spec, data, p, rng, training)


def predict(spec: ModelSpec, data: GraphData, params: dict) -> tuple[np.ndarray, list]:
    """Eval-mode logits as arrays."""
    tape = ad.Tape()
    tensors = {k: tape.const(v) for k, v in params.items()}
    logits, alphas = forward(spec, data, tensors, training=False)
    return logits.value, alphas


# ---------------------------------------------------------------------------
# Checkpoints: flat float64 blob plus a JSON manifest


def save_checkpoint(path, spec: ModelSpec, params: dict, extra: dict | None = None) -> None:
    path = Path(path)
    manifest = {"spec": spec.to_dict(), "tensors": [], "extra": extra or {}}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, value in params.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            fh.write(arr.tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> tuple[ModelSpec, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    params = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"]))
        params[t["name"]] = blob[t["offset"]:t["offset"] + size].reshape(t["shape"]).copy()
    return ModelSpec.from_dict(manifest["spec"]), params
