"""One-shot registration driver.

Each case is registered from scratch: fresh network weights, adaptive
moment estimation against the combined loss, and a three-condition
stopping rule on the similarity trace. Nothing is pretrained and nothing
is shared across cases — a run's only inputs are the image group, the
configuration, and a seed.

Loop shape: the terminating iteration computes its forward pass and loss
but applies no weight update, so the returned fields are the output of the
final forward and the checkpointed weights are exactly the weights that
produced them. Resuming re-runs that final iteration's update and then
continues; the joined run is step-for-step identical to an uninterrupted
one.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .core import FieldSet, ImageGroup, Volume
from .fields import warp_stack
from .losses import LossBreakdown, LossWeights, total_loss
from .network import DisplacementNet, NetConfig, NonFiniteError, build_network

STOP_CRITERIA = "criteria_met"
STOP_MAX_ITERS = "max_iters"
STOP_NON_FINITE = "non_finite"


@dataclass(frozen=True)
class RegConfig:
    net: NetConfig
    weights: LossWeights = LossWeights()
    learning_rate: float = 0.01
    n_stop: int = 100
    sigma_stop: float = 0.0007
    n_iter_min: int = 200
    max_iters: int = 3000
    seed: int = 0
    cyclic_enabled: bool = True
    device: str = "cpu"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.n_stop < 2:
            raise ValueError("n_stop must be >= 2")
        if not self.sigma_stop > 0:
            raise ValueError("sigma_stop must be positive")
        if self.n_iter_min < 1:
            raise ValueError("n_iter_min must be >= 1")
        if self.max_iters < self.n_iter_min:
            raise ValueError("max_iters must be >= n_iter_min")


@dataclass(frozen=True)
class RegReport:
    loss_trace: tuple[LossBreakdown, ...]
    stop_reason: str
    iterations: int
    wall_time: float
    seed: int

    def __post_init__(self):
        if self.iterations != len(self.loss_trace):
            raise ValueError("iterations must equal the trace length")
        if self.stop_reason not in (STOP_CRITERIA, STOP_MAX_ITERS, STOP_NON_FINITE):
            raise ValueError(f"unknown stop_reason {self.stop_reason!r}")


def implicit_template(warped) -> Volume | torch.Tensor:
    """Voxelwise mean of the warped phases — the group's implicit template."""
    if torch.is_tensor(warped):
        return warped.mean(dim=0)
    if isinstance(warped, ImageGroup):
        return Volume(warped.grid, warped.stacked().mean(axis=0))
    raise TypeError(f"expected ImageGroup or tensor, got {type(warped).__name__}")


def should_stop(recent_losses, running_min: float, current: float,
                iter_count: int, config: RegConfig) -> bool:
    """All three conditions must hold at once:

    (i)   the similarity window is full and its population standard
          deviation has fallen under sigma_stop,
    (ii)  the current similarity is no new minimum yet sits within
          sigma_stop/3 of the minimum seen so far (a plateau at the floor),
    (iii) the iteration count has passed the n_iter_min warm-up.

    ``running_min`` is the minimum over all iterations BEFORE the current
    one; ``recent_losses`` includes the current value.
    """
    if len(recent_losses) < config.n_stop:
        return False
    if float(np.std(np.asarray(recent_losses))) >= config.sigma_stop:
        return False
    if current < running_min or current > running_min + config.sigma_stop / 3:
        return False
    return iter_count > config.n_iter_min


def _fields_to_set(group: ImageGroup, fields: torch.Tensor) -> FieldSet:
    return FieldSet.for_group(group, fields.detach().cpu().numpy())


def _run_loop(net, opt, stack, group, config, *, start_iter, window, running_min,
              trace, redo_update):
    """Shared optimization loop for fresh and resumed runs.

    With ``redo_update`` the first pass only recomputes the checkpointed
    iteration's gradients and applies the update that was deliberately left
    out when the checkpoint was written.
    """
    t0 = time.perf_counter()
    eff_weights = config.weights if config.cyclic_enabled else replace(
        config.weights, lambda1=0.0)
    last_fields = None
    it = start_iter
    stop_reason = None
    while True:
        try:
            fields = net(stack)
        except NonFiniteError:
            if last_fields is None:
                raise
            stop_reason = STOP_NON_FINITE
            break
        warped = warp_stack(stack, fields)
        template = warped.mean(dim=0)
        bd = total_loss(warped, template, fields, eff_weights)
        if not bool(torch.isfinite(bd.total)):
            last_fields = fields.detach()
            stop_reason = STOP_NON_FINITE
            break
        if redo_update:
            # replay the update the checkpoint intentionally omitted
            redo_update = False
        else:
            it += 1
            last_fields = fields.detach()
            trace.append(bd.as_floats())
            sim = float(bd.similarity.detach())
            window.append(sim)
            if should_stop(list(window), running_min, sim, it, config):
                running_min = min(running_min, sim)
                stop_reason = STOP_CRITERIA
                break
            running_min = min(running_min, sim)
            if it >= config.max_iters:
                stop_reason = STOP_MAX_ITERS
                break
        opt.zero_grad()
        bd.total.backward()
        opt.step()
    wall = time.perf_counter() - t0
    report = RegReport(tuple(trace), stop_reason, len(trace), wall, config.seed)
    return last_fields, report, window, running_min


def register(group: ImageGroup, config: RegConfig, checkpoint_path=None):
    """Optimize fresh network weights for one image group.

    Returns the fields of the final forward pass and the run report. When
    ``checkpoint_path`` is given, the terminal state (weights, optimizer
    moments, stopping-rule state, trace) is archived there for `resume`.
    """
    if group.num_phases != config.net.num_phases:
        raise ValueError(
            f"group has {group.num_phases} phases, config expects {config.net.num_phases}"
        )
    device = torch.device(config.device)
    net = build_network(config.net, config.seed).to(device)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    dtype = next(net.parameters()).dtype
    stack = torch.tensor(group.stacked(), dtype=dtype, device=device)

    last_fields, report, window, running_min = _run_loop(
        net, opt, stack, group, config,
        start_iter=0, window=deque(maxlen=config.n_stop), running_min=float("inf"),
        trace=[], redo_update=False,
    )
    if checkpoint_path is not None:
        _save_checkpoint(checkpoint_path, net, opt, config, report, window, running_min)
    return _fields_to_set(group, last_fields), report


def _save_checkpoint(path, net, opt, config, report, window, running_min) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy()
              for k, v in net.state_dict().items()}
    names = [k for k, _ in net.named_parameters()]
    state = opt.state_dict()["state"]
    for idx, name in enumerate(names):
        if idx in state:
            arrays[f"adam/{name}/exp_avg"] = state[idx]["exp_avg"].cpu().numpy()
            arrays[f"adam/{name}/exp_avg_sq"] = state[idx]["exp_avg_sq"].cpu().numpy()
            arrays[f"adam/{name}/step"] = np.asarray(float(state[idx]["step"]))
    arrays["window"] = np.asarray(list(window), dtype=np.float64)
    arrays["running_min"] = np.asarray(running_min, dtype=np.float64)
    arrays["iteration"] = np.asarray(report.iterations, dtype=np.int64)
    arrays["trace"] = np.asarray(
        [[b.similarity, b.smoothness, b.cyclic, b.total] for b in report.loss_trace],
        dtype=np.float64,
    ).reshape(-1, 4)
    arrays["__regconfig__"] = np.frombuffer(
        json.dumps(asdict(config)).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    """Read a registration checkpoint into plain arrays and a RegConfig."""
    with np.load(path) as z:
        cfg_raw = json.loads(bytes(z["__regconfig__"]).decode())
        cfg_raw["net"] = NetConfig(**cfg_raw["net"])
        cfg_raw["weights"] = LossWeights(**cfg_raw["weights"])
        out = {
            "config": RegConfig(**cfg_raw),
            "params": {k[len("param/"):]: z[k] for k in z.files
                       if k.startswith("param/")},
            "adam": {k[len("adam/"):]: z[k] for k in z.files if k.startswith("adam/")},
            "window": z["window"].tolist(),
            "running_min": float(z["running_min"]),
            "iteration": int(z["iteration"]),
            "trace": z["trace"].copy(),
        }
    return out


def _trace_breakdowns(trace_array) -> list[LossBreakdown]:
    return [LossBreakdown(*row) for row in np.asarray(trace_array, dtype=float)]


def resume(checkpoint_path, group: ImageGroup, config: RegConfig,
           save_checkpoint_path=None):
    """Continue an archived registration up to ``config.max_iters`` TOTAL
    iterations (counted from the original run's start).

    The report's trace spans the whole joined run; its wall time covers
    only this process. If the checkpoint already reached max_iters the
    saved weights are evaluated once and returned unchanged. With
    ``save_checkpoint_path`` the continued run is archived in turn.
    """
    ck = load_checkpoint(checkpoint_path)
    if ck["config"].net != config.net:
        raise ValueError("checkpoint network config does not match")
    if group.num_phases != config.net.num_phases:
        raise ValueError(
            f"group has {group.num_phases} phases, config expects {config.net.num_phases}"
        )
    device = torch.device(config.device)
    net = DisplacementNet(config.net).to(device)
    net.load_state_dict({k: torch.tensor(v) for k, v in ck["params"].items()})
    dtype = next(net.parameters()).dtype
    stack = torch.tensor(group.stacked(), dtype=dtype, device=device)
    start_iter = ck["iteration"]
    trace = _trace_breakdowns(ck["trace"])

    if config.max_iters <= start_iter:
        t0 = time.perf_counter()
        with torch.no_grad():
            fields = net(stack)
        report = RegReport(tuple(trace), STOP_MAX_ITERS, start_iter,
                           time.perf_counter() - t0, config.seed)
        return _fields_to_set(group, fields), report

    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    sd = opt.state_dict()
    names = [k for k, _ in net.named_parameters()]
    state = {}
    for idx, name in enumerate(names):
        key = f"{name}/exp_avg"
        if key in ck["adam"]:
            state[idx] = {
                "step": torch.tensor(float(ck["adam"][f"{name}/step"])),
                "exp_avg": torch.tensor(ck["adam"][key]).to(device),
                "exp_avg_sq": torch.tensor(ck["adam"][f"{name}/exp_avg_sq"]).to(device),
            }
    sd["state"] = state
    opt.load_state_dict(sd)

    window = deque(ck["window"], maxlen=config.n_stop)
    last_fields, report, window, running_min = _run_loop(
        net, opt, stack, group, config,
        start_iter=start_iter, window=window, running_min=ck["running_min"],
        trace=trace, redo_update=True,
    )
    if save_checkpoint_path is not None:
        _save_checkpoint(save_checkpoint_path, net, opt, config, report,
                         window, running_min)
    return _fields_to_set(group, last_fields), report


def write_trace(report: RegReport, path) -> None:
    """Export the loss trace as tab-separated text, one row per iteration."""
    with open(path, "w") as f:
        f.write("iteration\tsimilarity\tsmoothness\tcyclic\ttotal\n")
        for i, b in enumerate(report.loss_trace, start=1):
            f.write(f"{i}\t{b.similarity:.10g}\t{b.smoothness:.10g}"
                    f"\t{b.cyclic:.10g}\t{b.total:.10g}\n")


__all__ = [
    "STOP_CRITERIA",
    "STOP_MAX_ITERS",
    "STOP_NON_FINITE",
    "RegConfig",
    "RegReport",
    "implicit_template",
    "should_stop",
    "register",
    "resume",
    "load_checkpoint",
    "write_trace",
]
