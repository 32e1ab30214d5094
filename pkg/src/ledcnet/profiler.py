"""Parameter, MAC, size and throughput accounting for a built model.

MACs are counted analytically from forward hooks on leaf modules:

* convolution: ``kh * kw * (C_in / groups) * C_out * H_out * W_out`` per sample
* normalization, activation, resize: one op per output element
* pooling: one op per input element
* attention: the sizes of the two matrix products plus one op per softmax entry

A leaf module with no rule raises :class:`UnsupportedLayerError` instead of
being skipped.
"""
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .decoder import RegionAttention, SpatialGather
from .errors import UnsupportedLayerError
from .layers import LayerNorm2d, Resize


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _conv_macs(m: nn.Conv2d, inputs, output):
    kh, kw = m.kernel_size
    return kh * kw * (m.in_channels // m.groups) * output.numel()


def _elementwise(m, inputs, output):
    return output.numel()


def _pool(m, inputs, output):
    return inputs[0].numel()


def _gather_macs(m, inputs, output):
    feats, logits = inputs
    n, k = logits.shape[:2]
    hw = logits.shape[-2] * logits.shape[-1]
    c = feats.shape[1]
    return n * k * hw * c + n * k * hw


def _attention_macs(m, inputs, output):
    query, key, value = inputs
    d, nq = query.shape[-2:]
    nkv = key.shape[-1]
    c = value.shape[-2]
    batch = query.numel() // (d * nq)
    return batch * (nq * nkv * d + nq * nkv + c * nq * nkv)


MAC_RULES = {
    nn.Conv2d: _conv_macs,
    nn.BatchNorm2d: _elementwise,
    LayerNorm2d: _elementwise,
    nn.ReLU: _elementwise,
    nn.GELU: _elementwise,
    Resize: _elementwise,
    nn.AvgPool2d: _pool,
    nn.AdaptiveAvgPool2d: _pool,
    SpatialGather: _gather_macs,
    RegionAttention: _attention_macs,
    nn.Identity: lambda m, i, o: 0,
    nn.Dropout: lambda m, i, o: 0,
}


def _rule_for(module):
    for kind in type(module).__mro__:
        if kind in MAC_RULES:
            return MAC_RULES[kind]
    return None


def count_macs(model: nn.Module, input_shape, breakdown=False):
    """Multiply-accumulates of one forward pass at ``input_shape`` (N, C, H, W).

    With ``breakdown=True`` also returns a dict of MACs per leaf module name.
    """
    per_module = {}
    handles = []
    for name, module in model.named_modules():
        if any(True for _ in module.children()):
            continue
        rule = _rule_for(module)
        if rule is None:
            raise UnsupportedLayerError(
                f"no MAC rule for layer {name or '<root>'} of type {type(module).__name__}")

        def hook(mod, inputs, output, _name=name, _rule=rule):
            per_module[_name] = per_module.get(_name, 0) + int(_rule(mod, inputs, output))
        handles.append(module.register_forward_hook(hook))

    was_training = model.training
    model.eval()
    try:
        param = next(model.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        with torch.no_grad():
            model(torch.zeros(*input_shape, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    total = sum(per_module.values())
    return (total, per_module) if breakdown else total


def measure_fps(model: nn.Module, input_shape, warmup=2, iters=5) -> float:
    """Median frames per second over ``iters`` timed forward passes."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    batch = input_shape[0]
    x = torch.randn(*input_shape)
    was_training = model.training
    model.eval()
    rates = []
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(iters):
                start = time.perf_counter()
                model(x)
                rates.append(batch / (time.perf_counter() - start))
    finally:
        model.train(was_training)
    return statistics.median(rates)


def hardware_description() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}; "
            f"torch {torch.__version__}; threads={torch.get_num_threads()}")


@dataclass
class EfficiencyReport:
    params: int
    macs: int
    flops_2x: int
    size_bytes: int
    element_bytes: int
    fps: float | None
    input_shape: list
    warmup: int
    iters: int
    batch_size: int
    hardware: str = field(default_factory=hardware_description)
    # which count the "FLOPs (G)" table column shows
    flops_convention: str = "macs"

    def __post_init__(self):
        if self.flops_2x != 2 * self.macs:
            raise ValueError("flops_2x must equal 2 * macs")
        if self.size_bytes != self.params * self.element_bytes:
            raise ValueError("size_bytes must equal params * element_bytes")

    @property
    def table_flops(self):
        return self.macs if self.flops_convention == "macs" else self.flops_2x

    def to_json(self, **kwargs) -> str:
        return json.dumps(asdict(self), **kwargs)


def profile(model: nn.Module, input_shape=(1, 3, 512, 512), warmup=2, iters=5,
            element_bytes=4, measure_speed=True) -> EfficiencyReport:
    params = count_params(model)
    macs = count_macs(model, input_shape)
    fps = measure_fps(model, input_shape, warmup, iters) if measure_speed else None
    return EfficiencyReport(
        params=params, macs=macs, flops_2x=2 * macs, size_bytes=params * element_bytes,
        element_bytes=element_bytes, fps=fps, input_shape=list(input_shape),
        warmup=warmup, iters=iters, batch_size=input_shape[0])


TABLE_COLUMNS = ("Method", "Params (M)", "Size (MB)", "FLOPs (G)", "FPS")


def format_table(rows: dict[str, EfficiencyReport]) -> str:
    """Aligned text table in the order Params (M), Size (MB), FLOPs (G), FPS."""
    body = []
    for name, r in rows.items():
        fps = "-" if r.fps is None else f"{r.fps:.1f}"
        body.append((name, f"{r.params / 1e6:.3f}", f"{r.size_bytes / 1e6:.3f}",
                     f"{r.table_flops / 1e9:.2f}", fps))
    widths = [max(len(str(row[i])) for row in [TABLE_COLUMNS, *body])
              for i in range(len(TABLE_COLUMNS))]
    lines = []
    for row in [TABLE_COLUMNS, *body]:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append(" | ".join(cells))
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
