"""Symbolic memory bound for training a decoded network on one batch.

The estimate walks the same structure :class:`~desknas.supernet.SearchNetwork`
builds, tracking per-sample element counts instead of arrays. For every op it
counts the arrays the forward pass keeps alive for backward ("retained") and
the scratch arrays its backward allocates ("workspace"). The bound is

    params * 4 (weights, grads, momentum, update scratch)
    + batch * (2 * sum(retained) + max(workspace))

where the factor 2 covers activation gradients alive alongside the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .genotype import Genotype

ITEMSIZE = {"float32": 4, "float64": 8}

# (kernel, dilation, kind) per op name; kind in plain/separable/split
_CONV_OPS = {
    "conv2d_1": (3, 1, "plain"), "conv2d_2": (5, 1, "plain"), "conv2d_3": (7, 1, "plain"),
    "depthconv2d_1": (3, 1, "separable"), "depthconv2d_2": (5, 1, "separable"),
    "depthconv2d_3": (7, 1, "separable"),
    "sep_conv_3x3": (3, 1, "separable"), "sep_conv_5x5": (5, 1, "separable"),
    "sep_conv_7x7": (7, 1, "separable"),
    "splitconv2d_1": (3, 1, "split"), "splitconv2d_2": (5, 1, "split"), "splitconv2d_3": (7, 1, "split"),
    "dil_conv_3x3": (3, 2, "separable"), "dil_conv_5x5": (5, 2, "separable"),
}


@dataclass
class MemoryEstimate:
    param_count: int
    itemsize: int
    batch: int
    retained: dict[str, int] = field(default_factory=dict)   # per-sample elements by component
    workspace: int = 0                                          # largest per-sample backward scratch

    @property
    def param_bytes(self) -> int:
        return 4 * self.param_count * self.itemsize

    @property
    def activation_bytes(self) -> int:
        per_sample = 2 * sum(self.retained.values()) + self.workspace
        return self.batch * per_sample * self.itemsize

    @property
    def total(self) -> int:
        return self.param_bytes + self.activation_bytes


class _Tally:
    def __init__(self):
        self.params = 0
        self.retained: dict[str, int] = {}
        self.workspace = 0

    def add(self, component: str, retained: int, workspace: int = 0) -> None:
        self.retained[component] = self.retained.get(component, 0) + int(retained)
        self.workspace = max(self.workspace, int(workspace))

    # -- primitive ops; shapes are per sample (C, H, W) --

    def conv(self, comp, c_in, c_out, h, w, kh, kw, sh=1, sw=1, dil=1, groups=1, bias=False):
        ph, pw = dil * (kh - 1) // 2, dil * (kw - 1) // 2
        hp, wp = h + 2 * ph, w + 2 * pw
        ho = (hp - dil * (kh - 1) - 1) // sh + 1
        wo = (wp - dil * (kw - 1) - 1) // sw + 1
        cols = c_in * kh * kw * ho * wo
        padded = c_in * hp * wp
        out = c_out * ho * wo
        self.params += c_out * (c_in // groups) * kh * kw + (c_out if bias else 0)
        self.add(comp, padded + (cols if groups == 1 else 0) + out * (2 if bias else 1),
                 3 * cols + 2 * padded + 2 * out)
        return c_out, ho, wo

    def norm(self, comp, c, h, w):
        self.params += 2 * c
        self.add(comp, 4 * c * h * w, 4 * c * h * w)

    def relu(self, comp, c, h, w):
        self.add(comp, 2 * c * h * w, 2 * c * h * w)

    def relu_conv_norm(self, comp, convs, c, h, w):
        self.relu(comp, c, h, w)
        for c_in, c_out, kh, kw, sh, sw, dil, groups in convs:
            c, h, w = self.conv(comp, c_in, c_out, h, w, kh, kw, sh, sw, dil, groups)
        self.norm(comp, c, h, w)
        return c, h, w

    def op(self, comp, kind, c, h, w, stride):
        if kind in _CONV_OPS:
            k, dil, style = _CONV_OPS[kind]
            if style == "plain":
                convs = [(c, c, k, k, stride, stride, 1, 1)]
            elif style == "separable":
                convs = [(c, c, k, k, stride, stride, dil, c), (c, c, 1, 1, 1, 1, 1, 1)]
            else:
                convs = [(c, c, k, 1, stride, 1, 1, 1), (c, c, 1, k, 1, stride, 1, 1)]
            return self.relu_conv_norm(comp, convs, c, h, w)
        ho, wo = -(-h // stride), -(-w // stride)
        if kind in ("avg_pool_3x3", "max_pool_3x3"):
            padded, out = c * (h + 2) * (w + 2), c * ho * wo
            self.add(comp, padded + 3 * out, 2 * 9 * out + 2 * padded)
        elif kind == "cut":
            self.add(comp, 2 * c * ho * wo, 2 * c * ho * wo)
        elif kind == "skip":
            self.add(comp, c * ho * wo if stride > 1 else 0, c * h * w)
        else:
            raise ValueError(f"unknown operation {kind!r}")
        return c, ho, wo

    def resample(self, comp, c, h, w, from_scale, to_scale):
        if from_scale == to_scale:
            return h, w
        f = 2 ** abs(to_scale - from_scale)
        h, w = (h // f, w // f) if to_scale > from_scale else (h * f, w * f)
        self.add(comp, c * h * w, c * h * w * f * f)
        return h, w


def _grandparent(network, v):
    preds = network.predecessors(v)
    if not preds:
        return None
    pp = network.predecessors(max(preds))
    return max(pp) if pp else None


def estimate_memory(genotype: Genotype, input_shape: tuple[int, ...], batch: int,
                    dtype: str = "float32") -> MemoryEstimate:
    """Upper bound on the bytes one training step of the decoded network allocates.

    ``input_shape`` is ``(C, H, W)`` of a single sample. The activation term is
    exactly linear in ``batch``.
    """
    genotype.validate()
    c_in, h, w = input_shape
    topo, net = genotype.topology, genotype.network
    cell_t = topo.cell
    t = _Tally()
    t.add("input", c_in * h * w)
    # stem
    width0 = net.nodes[0].width // 2 ** net.nodes[0].scale
    c, sh, sw = c_in, h, w
    for i in range(max(net.stem_strides, 1)):
        if i:
            t.relu("stem", c, sh, sw)
        s = 2 if i < net.stem_strides else 1
        c, sh, sw = t.conv("stem", c, width0, sh, sw, 3, 3, s, s)
        t.norm("stem", c, sh, sw)
    out_ch: list[int] = []
    out_hw: list[tuple[int, int]] = []
    for v, node in enumerate(net.nodes):
        comp = f"node:{node.name}"
        preds = net.predecessors(v)
        hh, ww = sh // 2 ** node.input_scale, sw // 2 ** node.input_scale
        if preds:
            for u in preds:
                uh, uw = out_hw[u]
                t.resample(comp, out_ch[u], uh, uw, net.nodes[u].scale, node.input_scale)
            c_cat = sum(out_ch[u] for u in preds)
            if len(preds) > 1:
                t.add(comp, c_cat * hh * ww)
        else:
            t.resample(comp, width0, sh, sw, 0, node.input_scale)
            c_cat = width0
        t.relu_conv_norm(comp, [(c_cat, node.width, 1, 1, 1, 1, 1, 1)], c_cat, hh, ww)
        if cell_t.num_input_nodes >= 2:
            g = _grandparent(net, v)
            if g is None:
                c_g = width0
                t.resample(comp, c_g, sh, sw, 0, node.input_scale)
            else:
                c_g = out_ch[g]
                gh, gw = out_hw[g]
                t.resample(comp, c_g, gh, gw, net.nodes[g].scale, node.input_scale)
            t.relu_conv_norm(comp, [(c_g, node.width, 1, 1, 1, 1, 1, 1)], c_g, hh, ww)
        template = cell_t.with_reduction(node.reduction)
        ct = "reduce" if node.reduction else "normal"
        cell = genotype.cells[ct]
        n_in = template.num_input_nodes
        oh, ow = (-(-hh // 2), -(-ww // 2)) if node.reduction else (hh, ww)
        for b in template.blocks:
            incoming = [(i, op) for i, j, op in cell.edges if j == b]
            for i, op in incoming:
                stride = 2 if template.reduction and i < n_in else 1
                ih, iw = (hh, ww) if i < n_in else (oh, ow)
                t.op(f"{comp}:ops", op, node.width, ih, iw, stride)
            if len(incoming) > 1:
                t.add(comp, (len(incoming) - 1) * node.width * oh * ow)
        c_out = node.width if template.style == "resnext" else node.width * template.num_blocks
        t.add(comp, c_out * oh * ow * (2 if template.style == "resnext" else 1))
        out_ch.append(c_out)
        out_hw.append((oh, ow))
    hh, ww = out_hw[net.sink]
    t.conv("head", out_ch[net.sink], 2, hh, ww, 1, 1, bias=True)
    t.add("head", 2 * h * w * 3, 2 * h * w * 2)
    t.add("loss", 2 * h * w * 10, 2 * h * w * 4)
    return MemoryEstimate(t.params, ITEMSIZE[dtype], batch, t.retained, t.workspace)


def measure_training_peak(genotype: Genotype, input_shape: tuple[int, ...], batch: int, seed: int = 0) -> int:
    """Peak traced bytes of building the network and running one training step."""
    import tracemalloc

    from .metrics import weighted_cross_entropy
    from .supernet import build_discrete_network
    from .tensor.core import Tensor
    from .tensor.optim import TrainState, sgd_momentum_step

    rng = np.random.default_rng(seed)
    images = rng.normal(size=(batch, *input_shape)).astype(np.float32)
    masks = (rng.random((batch, *input_shape[1:])) < 0.1).astype(np.uint8)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        net = build_discrete_network(genotype, seed)
        state = TrainState(net.parameters())
        loss = weighted_cross_entropy(net(Tensor(images)), masks)
        loss.backward()
        sgd_momentum_step(state, 0.01, 0.9, 1e-3)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base
