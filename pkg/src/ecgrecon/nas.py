"""Differentiable network search over an encoder-decoder backbone.

The backbone keeps a fixed down-sampling stem and up-sampling decoder and
exposes 14 searchable blocks between them. Each block picks one of 9
candidate operations (standard convs with kernel 3/5, inverted residual
blocks with kernel 3/5 and channel expansion 1/3/5, or a skip). A supernet
evaluates all candidates and mixes them with Gumbel-Softmax weights drawn
from per-block logits; weights and logits are trained jointly on the same
objective, which adds a multiply-accumulate (MAC) complexity penalty to the
reconstruction loss. The final network is the per-block argmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sigproc
from .hwmodel import ConvDims

BLOCK_KINDS = (
    "std_conv_k3",
    "std_conv_k5",
    "inv_res_k3_e1",
    "inv_res_k3_e3",
    "inv_res_k3_e5",
    "inv_res_k5_e1",
    "inv_res_k5_e3",
    "inv_res_k5_e5",
    "skip",
)
N_CANDIDATE_OPS = len(BLOCK_KINDS)
N_SEARCH_BLOCKS = 14
DEFAULT_WIDTHS = (48, 96)
GIGA = 1e9


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def search_space_size(n_blocks: int = N_SEARCH_BLOCKS) -> int:
    return N_CANDIDATE_OPS ** n_blocks


def _kind_params(kind: str):
    """(kernel, expansion) for a searchable-block kind; skip -> (0, 0)."""
    if kind == "skip":
        return 0, 0
    if kind.startswith("std_conv_k"):
        return int(kind[-1]), 0
    _, k, e = kind.rsplit("_", 2)
    return int(k[1]), int(e[1])


# ---------------------------------------------------------------------------
# Network specification
# ---------------------------------------------------------------------------

@dataclass
class LayerRecord:
    """One backbone entry; searchable blocks keep their composite kind."""

    name: str
    kind: str          # conv | deconv | maxpool | upsample | a BLOCK_KINDS entry
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    expansion: int = 0


@dataclass
class NetworkSpec:
    """Ordered layer list with enough geometry to rebuild and cost the net."""

    layers: list
    in_planes: int
    grid: tuple = (16, 16)

    def depth(self) -> int:
        """Number of convolution layers (inverted residual counts its three);
        pooling, upsampling and skips do not count."""
        total = 0
        for rec in self.layers:
            if rec.kind in ("conv", "deconv"):
                total += 1
            elif rec.kind.startswith("std_conv"):
                total += 1
            elif rec.kind.startswith("inv_res"):
                total += 3
        return total

    def conv_dims(self) -> list:
        """Flatten every layer into its constituent convolution loop bounds."""
        dims: list[ConvDims] = []
        h, w = self.grid
        for rec in self.layers:
            if rec.kind == "maxpool":
                h //= rec.stride
                w //= rec.stride
            elif rec.kind == "upsample":
                h *= rec.stride
                w *= rec.stride
            elif rec.kind in ("conv", "deconv"):
                dims.append(ConvDims(rec.out_ch, rec.in_ch, h, w, rec.kernel, rec.kernel))
            elif rec.kind.startswith("std_conv"):
                k, _ = _kind_params(rec.kind)
                dims.append(ConvDims(rec.out_ch, rec.in_ch, h, w, k, k))
            elif rec.kind.startswith("inv_res"):
                k, e = _kind_params(rec.kind)
                hidden = rec.in_ch * e
                dims.append(ConvDims(hidden, rec.in_ch, h, w, 1, 1))
                dims.append(ConvDims(hidden, 1, h, w, k, k, depthwise=True))
                dims.append(ConvDims(rec.out_ch, hidden, h, w, 1, 1))
            # skip contributes nothing
        return dims

    def save(self, path: str) -> None:
        payload = {
            "in_planes": self.in_planes,
            "grid": list(self.grid),
            "layers": [vars(rec) for rec in self.layers],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "NetworkSpec":
        with open(path) as fh:
            payload = json.load(fh)
        layers = [LayerRecord(**entry) for entry in payload["layers"]]
        return cls(layers=layers, in_planes=payload["in_planes"],
                   grid=tuple(payload["grid"]))


def make_backbone(block_kinds, in_planes: int = 10, out_planes: int = 24,
                  widths=DEFAULT_WIDTHS, grid=(16, 16)) -> NetworkSpec:
    """Assemble the full spec: fixed stem, chosen blocks, fixed decoder.

    The stem halves the grid twice (conv k7, pool, conv k5, pool) and the
    decoder mirrors it (deconv k5, up, deconv k7, up, three k3 convs), so
    searchable blocks run at one quarter of the input resolution and all
    preserve shape.
    """
    w1, w2 = widths
    layers = [
        LayerRecord("stem.conv1", "conv", in_planes, w1, 7),
        LayerRecord("stem.pool1", "maxpool", stride=2),
        LayerRecord("stem.conv2", "conv", w1, w2, 5),
        LayerRecord("stem.pool2", "maxpool", stride=2),
    ]
    for i, kind in enumerate(block_kinds):
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}")
        layers.append(LayerRecord(f"block{i:02d}", kind, w2, w2,
                                  kernel=_kind_params(kind)[0],
                                  expansion=_kind_params(kind)[1]))
    layers += [
        LayerRecord("dec.deconv1", "deconv", w2, w1, 5),
        LayerRecord("dec.up1", "upsample", stride=2),
        LayerRecord("dec.deconv2", "deconv", w1, w2, 7),
        LayerRecord("dec.up2", "upsample", stride=2),
        LayerRecord("dec.conv1", "conv", w2, out_planes, 3),
        LayerRecord("dec.conv2", "conv", out_planes, out_planes, 3),
        LayerRecord("dec.conv3", "conv", out_planes, out_planes, 3),
    ]
    return NetworkSpec(layers=layers, in_planes=in_planes, grid=grid)


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

def count_macs(dims: ConvDims) -> int:
    """Multiply-accumulate count of one convolution (Eq-style loop volume)."""
    return dims.macs


def network_macs(spec: NetworkSpec) -> int:
    return sum(d.macs for d in spec.conv_dims())


def block_macs(kind: str, channels: int, spatial: tuple) -> int:
    """MACs of one searchable block at the given width and map size."""
    h, w = spatial
    if kind == "skip":
        return 0
    k, e = _kind_params(kind)
    if kind.startswith("std_conv"):
        return channels * channels * h * w * k * k
    hidden = channels * e
    expand = channels * hidden * h * w
    depthwise = hidden * h * w * k * k
    project = hidden * channels * h * w
    return expand + depthwise + project


# ---------------------------------------------------------------------------
# Parameters and forward passes
# ---------------------------------------------------------------------------

def _he_init(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _init_conv(params, rng, name, out_ch, in_ch, k):
    params[f"{name}.w"] = ad.parameter(_he_init(rng, (out_ch, in_ch, k, k), in_ch * k * k))
    params[f"{name}.b"] = ad.parameter(np.zeros(out_ch))


def _init_deconv(params, rng, name, in_ch, out_ch, k):
    params[f"{name}.w"] = ad.parameter(_he_init(rng, (in_ch, out_ch, k, k), in_ch * k * k))
    params[f"{name}.b"] = ad.parameter(np.zeros(out_ch))


def _init_depthwise(params, rng, name, ch, k):
    params[f"{name}.w"] = ad.parameter(_he_init(rng, (ch, 1, k, k), k * k))
    params[f"{name}.b"] = ad.parameter(np.zeros(ch))


def _init_block(params, rng, prefix, kind, channels):
    if kind == "skip":
        return
    k, e = _kind_params(kind)
    if kind.startswith("std_conv"):
        _init_conv(params, rng, f"{prefix}.{kind}", channels, channels, k)
        return
    hidden = channels * e
    _init_conv(params, rng, f"{prefix}.{kind}.expand", hidden, channels, 1)
    _init_depthwise(params, rng, f"{prefix}.{kind}.dw", hidden, k)
    _init_conv(params, rng, f"{prefix}.{kind}.project", channels, hidden, 1)


def _conv_layer(params, name, x, stride=1):
    w = params[f"{name}.w"]
    pad = (w.data.shape[2] - 1) // 2
    return ad.conv2d(x, w, params[f"{name}.b"], stride=stride, padding=pad)


def _deconv_layer(params, name, x):
    w = params[f"{name}.w"]
    pad = (w.data.shape[2] - 1) // 2
    return ad.transposed_conv2d(x, w, params[f"{name}.b"], stride=1, padding=pad)


def _block_forward(params, prefix, kind, x):
    if kind == "skip":
        return x
    if kind.startswith("std_conv"):
        return ad.relu(_conv_layer(params, f"{prefix}.{kind}", x))
    base = f"{prefix}.{kind}"
    h = ad.relu(_conv_layer(params, f"{base}.expand", x))
    w = params[f"{base}.dw.w"]
    pad = (w.data.shape[2] - 1) // 2
    h = ad.relu(ad.depthwise_conv2d(h, w, params[f"{base}.dw.b"], padding=pad))
    h = _conv_layer(params, f"{base}.project", h)
    return ad.add(h, x)


_INV_KINDS = tuple(k for k in BLOCK_KINDS if k.startswith("inv_res"))


def _all_candidates(params, prefix, x):
    """Evaluate all nine candidate ops on one input, in BLOCK_KINDS order.

    The six inverted-residual branches share the input and their pointwise
    and depthwise stages are mathematically independent per channel, so
    they are batched through concatenated weight banks (one expand GEMM and
    one depthwise pass per kernel size) and split back for projection. The
    result per candidate is identical to running :func:`_block_forward`.
    """
    outs: dict[str, ad.Tensor] = {"skip": x}
    for kind in ("std_conv_k3", "std_conv_k5"):
        outs[kind] = ad.relu(_conv_layer(params, f"{prefix}.{kind}", x))

    expand_w = ad.concat0([params[f"{prefix}.{k}.expand.w"] for k in _INV_KINDS])
    expand_b = ad.concat0([params[f"{prefix}.{k}.expand.b"] for k in _INV_KINDS])
    hidden = ad.relu(ad.conv2d(x, expand_w, expand_b))

    widths = [params[f"{prefix}.{k}.expand.w"].data.shape[0] for k in _INV_KINDS]
    bounds = np.concatenate([[0], np.cumsum(widths)])
    by_kernel = {}
    for kset, kernel, pad in ((_INV_KINDS[:3], 3, 1), (_INV_KINDS[3:], 5, 2)):
        lo = bounds[_INV_KINDS.index(kset[0])]
        hi = bounds[_INV_KINDS.index(kset[-1]) + 1]
        dw_w = ad.concat0([params[f"{prefix}.{k}.dw.w"] for k in kset])
        dw_b = ad.concat0([params[f"{prefix}.{k}.dw.b"] for k in kset])
        seg = ad.narrow_channels(hidden, int(lo), int(hi))
        by_kernel[kernel] = ad.relu(ad.depthwise_conv2d(seg, dw_w, dw_b, padding=pad))

    for j, kind in enumerate(_INV_KINDS):
        kernel = _kind_params(kind)[0]
        base = bounds[3 * (kernel == 5)]
        seg = ad.narrow_channels(by_kernel[kernel],
                                 int(bounds[j] - base), int(bounds[j + 1] - base))
        proj = _conv_layer(params, f"{prefix}.{kind}.project", seg)
        outs[kind] = ad.add(proj, x)
    return [outs[kind] for kind in BLOCK_KINDS]


def init_network_params(spec: NetworkSpec, rng) -> dict:
    """Fresh parameters for a concrete network, keyed like the supernet's."""
    params: dict[str, ad.Tensor] = {}
    for rec in spec.layers:
        if rec.kind == "conv":
            _init_conv(params, rng, rec.name, rec.out_ch, rec.in_ch, rec.kernel)
        elif rec.kind == "deconv":
            _init_deconv(params, rng, rec.name, rec.in_ch, rec.out_ch, rec.kernel)
        elif rec.kind in BLOCK_KINDS:
            _init_block(params, rng, rec.name, rec.kind, rec.in_ch)
    return params


def network_forward(spec: NetworkSpec, params: dict, x) -> ad.Tensor:
    """Run a concrete network; ``x`` is an (n, in_planes, h, w) array."""
    out = ad.tensor(x) if not isinstance(x, ad.Tensor) else x
    last_conv = max(i for i, rec in enumerate(spec.layers) if rec.kind == "conv")
    for i, rec in enumerate(spec.layers):
        if rec.kind == "maxpool":
            out = ad.maxpool2(out, 2, rec.stride)
        elif rec.kind == "upsample":
            out = ad.upsample_nearest(out, rec.stride)
        elif rec.kind == "conv":
            out = _conv_layer(params, rec.name, out)
            if i != last_conv:
                out = ad.relu(out)
        elif rec.kind == "deconv":
            out = ad.relu(_deconv_layer(params, rec.name, out))
        elif rec.kind in BLOCK_KINDS:
            out = _block_forward(params, rec.name, rec.kind, out)
        else:
            raise ValueError(f"unknown layer kind {rec.kind!r}")
    return out


# ---------------------------------------------------------------------------
# Supernet
# ---------------------------------------------------------------------------

class SupernetState:
    """All candidate-op parameters plus per-block architecture logits.

    Logits start at zero (uniform choice); ``mac_weight`` scales the
    complexity penalty and may be doubled by a depth-constrained search.
    """

    def __init__(self, in_planes: int = 10, out_planes: int = 24,
                 widths=DEFAULT_WIDTHS, n_blocks: int = N_SEARCH_BLOCKS,
                 grid=(16, 16), mac_weight: float = 1.0,
                 temperature: float = 1.0, lr: float = 1e-3,
                 weight_decay: float = 1e-3, seed: int = 0):
        self.in_planes = in_planes
        self.out_planes = out_planes
        self.widths = tuple(widths)
        self.n_blocks = n_blocks
        self.grid = tuple(grid)
        self.mac_weight = float(mac_weight)
        self.temperature = float(temperature)

        rng = np.random.default_rng(np.random.SeedSequence(seed))
        skeleton = make_backbone(["skip"] * n_blocks, in_planes, out_planes,
                                 self.widths, self.grid)
        self.params = init_network_params(skeleton, rng)
        width = self.widths[1]
        for i in range(n_blocks):
            for kind in BLOCK_KINDS:
                _init_block(self.params, rng, f"block{i:02d}", kind, width)
        self.arch_logits = ad.parameter(np.zeros((n_blocks, N_CANDIDATE_OPS)))

        block_h, block_w = self.grid[0] // 4, self.grid[1] // 4
        self.block_mac_table = np.array([
            [block_macs(kind, width, (block_h, block_w)) for kind in BLOCK_KINDS]
            for _ in range(n_blocks)
        ], dtype=float)
        self.fixed_macs = network_macs(skeleton)

        weights = [p for n, p in self.params.items() if n.endswith(".w")]
        biases = [p for n, p in self.params.items() if n.endswith(".b")]
        self.optimizer = ad.Adam(
            [
                {"params": weights, "weight_decay": weight_decay},
                {"params": biases + [self.arch_logits], "weight_decay": 0.0},
            ],
            lr=lr,
        )
        self.step_count = 0

    def block_probabilities(self) -> np.ndarray:
        z = self.arch_logits.data - self.arch_logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def supernet_forward(state: SupernetState, x, rng=None, weights=None):
    """Mix all candidate ops per block with sampled (or given) weights.

    Args:
        x: (batch, in_planes, h, w) array of input planes.
        rng: generator for Gumbel-Softmax sampling (one draw per block).
        weights: optional (n_blocks, 9) array overriding the sampling, e.g.
            one-hot rows to force a specific sub-network.

    Returns:
        (prediction Tensor, list of per-block weight vectors).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 4 or x.shape[1] != state.in_planes:
        raise ValueError(f"expected (batch, {state.in_planes}, h, w) input, got {x.shape}")
    params = state.params
    out = ad.relu(_conv_layer(params, "stem.conv1", ad.tensor(x)))
    out = ad.maxpool2(out, 2, 2)
    out = ad.relu(_conv_layer(params, "stem.conv2", out))
    out = ad.maxpool2(out, 2, 2)

    sampled = []
    for i in range(state.n_blocks):
        prefix = f"block{i:02d}"
        if weights is not None:
            w_vec = ad.tensor(np.asarray(weights[i], dtype=float))
        else:
            logits = ad.pick_row(state.arch_logits, i)
            w_vec = ad.gumbel_softmax(logits, state.temperature, rng=rng)
        out = ad.weighted_sum(_all_candidates(params, prefix, out), w_vec)
        sampled.append(w_vec.data.copy())

    out = ad.relu(_deconv_layer(params, "dec.deconv1", out))
    out = ad.upsample_nearest(out, 2)
    out = ad.relu(_deconv_layer(params, "dec.deconv2", out))
    out = ad.upsample_nearest(out, 2)
    out = ad.relu(_conv_layer(params, "dec.conv1", out))
    out = ad.relu(_conv_layer(params, "dec.conv2", out))
    out = _conv_layer(params, "dec.conv3", out)
    return out, sampled


def expected_macs(state: SupernetState) -> ad.Tensor:
    """Differentiable expected MAC count under the current logits.

    Per block, the candidate MAC counts are averaged under the softmax of
    that block's logits; the fixed stem/decoder MACs enter as a constant.
    """
    return ad.scale(ad.softmax_dot(state.arch_logits, state.block_mac_table),
                    1.0, offset=float(state.fixed_macs))


def dns_step(state: SupernetState, batch_x, batch_y, rng) -> tuple:
    """One joint update of supernet weights and architecture logits.

    The loss is the negative-Pearson reconstruction term plus
    mac_weight * expected-MACs (in giga-MACs). Returns (l_rec, l_mac).
    """
    pred, _ = supernet_forward(state, batch_x, rng=rng)
    l_rec = ad.pearson_loss(pred, batch_y)
    l_mac = ad.scale(expected_macs(state), state.mac_weight / GIGA)
    total = ad.add(l_rec, l_mac)
    if not np.isfinite(total.item()):
        raise DivergenceError(f"search loss is not finite at step {state.step_count}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step_count += 1
    return float(l_rec.item()), float(l_mac.item())


@dataclass
class DeriveResult:
    spec: NetworkSpec
    kinds: list
    depth: int
    exceeds_limit: bool


def derive_network(state: SupernetState, depth_limit: int | None = None) -> DeriveResult:
    """Pick the argmax candidate per block (ties: lowest index).

    When ``depth_limit`` is given, the result only reports whether the
    derived depth exceeds it; the search loop reacts by doubling the MAC
    weight and continuing.
    """
    idx = np.argmax(state.arch_logits.data, axis=1)
    kinds = [BLOCK_KINDS[k] for k in idx]
    spec = make_backbone(kinds, state.in_planes, state.out_planes,
                         state.widths, state.grid)
    depth = spec.depth()
    exceeds = depth_limit is not None and depth > depth_limit
    return DeriveResult(spec=spec, kinds=kinds, depth=depth, exceeds_limit=exceeds)


# ---------------------------------------------------------------------------
# Data preparation, search loop, training
# ---------------------------------------------------------------------------

def prepare_grids(beats, egm_channels=None,
                  stft_config: sigproc.StftConfig = sigproc.DEFAULT_STFT):
    """STFT every beat into network planes.

    Returns (x, y): x is (n, 2*len(egm_channels), K, T_f) from the EGM
    channels (all five by default) and y is (n, 24, K, T_f) from the ECG.
    """
    xs, ys = [], []
    for beat in beats:
        egm = beat.egm if egm_channels is None else beat.egm[list(egm_channels)]
        xs.append(sigproc.grid_to_planes(sigproc.stft(egm, stft_config)))
        ys.append(sigproc.grid_to_planes(sigproc.stft(beat.ecg, stft_config)))
    return np.stack(xs), np.stack(ys)


@dataclass
class SearchResult:
    state: SupernetState
    derive: DeriveResult
    history: list = field(default_factory=list)
    mac_weight_final: float = 0.0


def run_search(state: SupernetState, x_train, y_train, steps: int, rng,
               batch_size: int = 16, depth_limit: int | None = None,
               check_every: int = 500, trace=None) -> SearchResult:
    """Drive dns_step over shuffled batches until done and depth-compliant.

    With a depth limit, the derived depth is checked every ``check_every``
    steps and at the end; each violation doubles the MAC weight and extends
    the search by another ``check_every`` steps (the all-skip network keeps
    the fixed 7 conv layers, so doubling terminates).
    """
    n = x_train.shape[0]
    if n < 1:
        raise ValueError("empty training set")
    history = []
    order = rng.permutation(n)
    cursor = 0
    step = 0
    budget = steps
    while step < budget:
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        take = order[cursor:cursor + min(batch_size, n)]
        cursor += batch_size
        l_rec, l_mac = dns_step(state, x_train[take], y_train[take], rng)
        history.append((step, l_rec, l_mac))
        if trace is not None:
            trace(step, state)
        step += 1
        due = depth_limit is not None and (step % check_every == 0 or step == budget)
        if due and derive_network(state, depth_limit).exceeds_limit:
            state.mac_weight *= 2.0
            if step == budget:
                budget += check_every
            if state.mac_weight > 2 ** 40:
                raise DivergenceError("depth limit unreachable; MAC weight overflow")
    return SearchResult(state=state, derive=derive_network(state, depth_limit),
                        history=history, mac_weight_final=state.mac_weight)


@dataclass
class TrainResult:
    params: dict
    per_channel_r: np.ndarray
    mean_r: float
    history: list


def evaluate_network(spec: NetworkSpec, params: dict, beats, egm_channels=None,
                     stft_config: sigproc.StftConfig = sigproc.DEFAULT_STFT,
                     batch_size: int = 64):
    """Mean time-domain Pearson per ECG lead over a beat collection.

    Predictions are converted back to waveforms with the inverse STFT and
    correlated against the measured leads; degenerate pairs score 0.
    """
    x, _ = prepare_grids(beats, egm_channels, stft_config)
    n_leads = sigproc.N_ECG_CHANNELS
    sums = np.zeros(n_leads)
    with ad.no_grad():
        for lo in range(0, len(beats), batch_size):
            batch = beats[lo:lo + batch_size]
            pred = network_forward(spec, params, x[lo:lo + len(batch)]).data
            for beat, planes in zip(batch, pred):
                wave = sigproc.istft(sigproc.planes_to_grid(planes), stft_config)
                for ch in range(n_leads):
                    sums[ch] += sigproc.pearson(wave[ch], beat.ecg[ch])
    per_channel = sums / max(len(beats), 1)
    return per_channel, float(per_channel.mean())


def train_network(spec: NetworkSpec, dataset: sigproc.Dataset, epochs: int,
                  seed: int = 0, egm_channels=None, batch_size: int = 16,
                  lr: float = 1e-3, weight_decay: float = 1e-3,
                  stft_config: sigproc.StftConfig = sigproc.DEFAULT_STFT,
                  log=None) -> TrainResult:
    """Train a derived network from scratch and score it on the test split.

    Follows the fixed recipe (Adam, batch 16, lr 1e-3, decoupled weight
    decay 1e-3 on conv weights) and reports the per-lead time-domain
    correlation on the held-out beats.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    params = init_network_params(spec, rng)
    weights = [p for n, p in params.items() if n.endswith(".w")]
    biases = [p for n, p in params.items() if n.endswith(".b")]
    opt = ad.Adam([
        {"params": weights, "weight_decay": weight_decay},
        {"params": biases, "weight_decay": 0.0},
    ], lr=lr)

    x_train, y_train = prepare_grids(dataset.train_beats, egm_channels, stft_config)
    n = len(x_train)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n - batch_size + 1, batch_size):
            take = order[lo:lo + batch_size]
            pred = network_forward(spec, params, x_train[take])
            loss = ad.pearson_loss(pred, y_train[take])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"training loss is not finite in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else 0.0
        history.append((epoch, mean_loss))
        if log is not None:
            log(epoch, mean_loss)

    per_channel, mean_r = evaluate_network(spec, params, dataset.test_beats,
                                           egm_channels, stft_config)
    return TrainResult(params=params, per_channel_r=per_channel,
                       mean_r=mean_r, history=history)
