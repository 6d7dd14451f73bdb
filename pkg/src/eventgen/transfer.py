"""Event transferring path: reference trace extraction and injection plans.

The reference image is encoded, noised to each scheduled timestep (one
shared noise tensor across timesteps by default, or DDIM inversion as an
alternative extraction mode), and passed through the U-Net under the null
prompt with record-only hooks. The stored spatial features and
self-attention maps are then replayed into the generation pass by direct
replacement at the scheduled (site, step) pairs.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import AttentionTrace, Backbone, InterventionSet, LayerAddress, addr, read_blob, write_blob
from .errors import AddressError, ConsistencyError, DataError, ParameterError
from .schedule import NoiseSchedule, forward_noise

CONTEXT_MAGIC = b"EVGC"
EXTRACTION_MODES = ("forward", "inversion")


@dataclass(frozen=True)
class SiteRange:
    """One injection site with an inclusive sampling-step range."""

    address: LayerAddress
    start: int
    stop: int  # inclusive

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise ParameterError(f"bad step range [{self.start}, {self.stop}] at {self.address}")

    def contains(self, step_index: int) -> bool:
        return self.start <= step_index <= self.stop


@dataclass(frozen=True)
class InjectionSchedule:
    feature_sites: tuple[SiteRange, ...]
    self_attn_sites: tuple[SiteRange, ...]

    def active(self, step_index: int) -> tuple[list[LayerAddress], list[LayerAddress]]:
        feats = [s.address for s in self.feature_sites if s.contains(step_index)]
        attns = [s.address for s in self.self_attn_sites if s.contains(step_index)]
        return feats, attns

    def scheduled_steps(self) -> list[int]:
        steps: set[int] = set()
        for site in self.feature_sites + self.self_attn_sites:
            steps.update(range(site.start, site.stop + 1))
        return sorted(steps)

    def is_empty(self) -> bool:
        return not (self.feature_sites or self.self_attn_sites)

    def validate(self, backbone: Backbone, sampling_steps: int) -> None:
        for site in self.feature_sites:
            backbone.layer_info(site.address)
            if site.stop >= sampling_steps:
                raise ParameterError(f"feature range at {site.address} exceeds {sampling_steps} steps")
        for site in self.self_attn_sites:
            if not backbone.layer_info(site.address).with_attention:
                raise AddressError(f"self-attention injection at attention-free layer {site.address}")
            if site.stop >= sampling_steps:
                raise ParameterError(f"self-attn range at {site.address} exceeds {sampling_steps} steps")

    def key(self) -> str:
        parts = [
            "f:" + ";".join(f"{s.address}@{s.start}-{s.stop}" for s in self.feature_sites),
            "sa:" + ";".join(f"{s.address}@{s.start}-{s.stop}" for s in self.self_attn_sites),
        ]
        return "|".join(parts)


def default_schedule(sampling_steps: int) -> InjectionSchedule:
    """Published defaults: features at dec1:1 for all steps; self-attention at
    dec1:[1,2] + dec2:[0,1,2] + dec3:[0,1,2] for the first half of the steps."""
    if sampling_steps < 1:
        raise ParameterError("sampling_steps must be >= 1")
    last = sampling_steps - 1
    feature_sites = (SiteRange(addr("dec1:1"), 0, last),)
    half = sampling_steps // 2
    sa_addrs = ["dec1:1", "dec1:2", "dec2:0", "dec2:1", "dec2:2", "dec3:0", "dec3:1", "dec3:2"]
    if half == 0:
        return InjectionSchedule(feature_sites, ())
    sa_sites = tuple(SiteRange(addr(a), 0, half - 1) for a in sa_addrs)
    return InjectionSchedule(feature_sites, sa_sites)


class ReferenceContext:
    """Cached reference traces consumed by injection.

    ``traces`` maps timestep -> AttentionTrace restricted to scheduled sites.
    In streaming mode traces are computed per step on demand (bit-identical
    to precomputation, since each step's extraction is independent).
    """

    def __init__(
        self,
        z0_R: torch.Tensor,
        shared_eps: torch.Tensor,
        step_indices: tuple[int, ...],
        schedule: InjectionSchedule,
        seed: int,
        extraction: str = "forward",
        ref_hash: str = "",
    ):
        if tuple(shared_eps.shape) != tuple(z0_R.shape):
            raise ParameterError("shared_eps shape must equal z0_R shape")
        self.z0_R = z0_R
        self.shared_eps = shared_eps
        self.step_indices = step_indices
        self.schedule = schedule
        self.seed = seed
        self.extraction = extraction
        self.ref_hash = ref_hash
        self.traces: dict[int, AttentionTrace] = {}
        self._backbone: Backbone | None = None  # set in streaming mode
        self._noise_schedule: NoiseSchedule | None = None

    def timestep_of(self, step_index: int) -> int:
        if not 0 <= step_index < len(self.step_indices):
            raise ParameterError(f"step index {step_index} outside sampling range")
        return self.step_indices[step_index]

    def trace_at(self, step_index: int) -> AttentionTrace:
        t = self.timestep_of(step_index)
        if t not in self.traces:
            if self._backbone is None:
                raise ConsistencyError(f"no cached reference trace for step {step_index} (t={t})")
            self.traces[t] = _extract_step(
                self._backbone, self.z0_R, self.shared_eps, t, step_index, self.schedule, self._noise_schedule
            )
        return self.traces[t]

    def key(self) -> dict:
        return {
            "ref_hash": self.ref_hash,
            "seed": self.seed,
            "schedule_key": self.schedule.key(),
            "extraction": self.extraction,
        }


def _record_set(schedule: InjectionSchedule, step_index: int):
    feats, attns = schedule.active(step_index)
    records = {(a, "f") for a in feats} | {(a, "sa") for a in attns}
    return records


def _extract_step(backbone, z0, eps, t, step_index, schedule, noise_schedule) -> AttentionTrace:
    records = _record_set(schedule, step_index)
    z_t = forward_noise(z0, t, eps, noise_schedule)
    null_prompt = backbone.embed_prompt([])
    _, trace = backbone.denoise_forward(z_t, t, null_prompt, InterventionSet(record=records))
    return trace


def image_hash(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image, dtype=np.float32)
    digest = hashlib.sha256()
    digest.update(str(arr.shape).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


def prepare_reference(
    reference_image: np.ndarray,
    seed: int,
    s: NoiseSchedule,
    backbone: Backbone,
    schedule: InjectionSchedule,
    extraction: str = "forward",
    streaming: bool = False,
) -> ReferenceContext:
    """Encode the reference and cache traces at all scheduled (site, step) pairs."""
    if extraction not in EXTRACTION_MODES:
        raise ParameterError(f"extraction mode {extraction!r} not in {EXTRACTION_MODES}")
    schedule.validate(backbone, s.sampling_steps)
    z0 = backbone.encode_image(reference_image)
    gen = torch.Generator().manual_seed(seed)
    shared_eps = torch.randn(z0.shape, generator=gen, dtype=torch.float32)
    ctx = ReferenceContext(
        z0_R=z0,
        shared_eps=shared_eps,
        step_indices=tuple(s.step_indices),
        schedule=schedule,
        seed=seed,
        extraction=extraction,
        ref_hash=image_hash(reference_image),
    )
    scheduled = schedule.scheduled_steps()
    if extraction == "inversion":
        _extract_by_inversion(ctx, backbone, s, scheduled)
        return ctx
    if streaming:
        ctx._backbone = backbone
        ctx._noise_schedule = s
        return ctx
    ctx._noise_schedule = s
    for k in scheduled:
        t = s.step_indices[k]
        ctx.traces[t] = _extract_step(backbone, z0, shared_eps, t, k, schedule, s)
    return ctx


def _extract_by_inversion(ctx: ReferenceContext, backbone: Backbone, s: NoiseSchedule, scheduled) -> None:
    """Deterministic DDIM inversion up the ladder; traces recorded at each
    inverted latent's own timestep."""
    null_prompt = backbone.embed_prompt([])
    ladder = list(reversed(s.step_indices))  # ascending timesteps
    step_of = {t: k for k, t in enumerate(s.step_indices)}
    z = ctx.z0_R
    t_cur = 0
    for t_next in ladder:
        eps, _ = backbone.denoise_forward(z, t_cur, null_prompt)
        abar_cur = s.abar(t_cur)
        abar_next = s.abar(t_next)
        c1 = math.sqrt(abar_next / abar_cur)
        c2 = math.sqrt(1.0 - abar_next) - c1 * math.sqrt(1.0 - abar_cur)
        z = c1 * z.to(torch.float64) + c2 * eps.to(torch.float64)
        t_cur = t_next
        k = step_of[t_cur]
        if k in scheduled:
            records = _record_set(ctx.schedule, k)
            _, trace = backbone.denoise_forward(z, t_cur, null_prompt, InterventionSet(record=records))
            ctx.traces[t_cur] = trace


def build_interventions(ctx: ReferenceContext, step_index: int, schedule: InjectionSchedule) -> InterventionSet:
    """Replacement set for one sampling step; empty when nothing is scheduled."""
    feats, attns = schedule.active(step_index)
    if not feats and not attns:
        return InterventionSet()
    trace = ctx.trace_at(step_index)
    replace_f = {}
    replace_sa = {}
    for address in feats:
        if not trace.has(address, "f"):
            raise ConsistencyError(f"reference trace missing feature at {address}, step {step_index}")
        replace_f[address] = trace.f[address]
    for address in attns:
        if not trace.has(address, "sa"):
            raise ConsistencyError(f"reference trace missing self-attention at {address}, step {step_index}")
        replace_sa[address] = trace.sa[address]
    return InterventionSet(replace_f=replace_f, replace_sa=replace_sa)


# --- cache serialization ---------------------------------------------------


def save_reference_context(ctx: ReferenceContext, path) -> None:
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    arrays["z0_R"] = ctx.z0_R.numpy()
    arrays["shared_eps"] = ctx.shared_eps.numpy()
    geometry = {}
    for t, trace in sorted(ctx.traces.items()):
        for quantity in ("f", "sa", "ca"):
            for address, tensor in sorted(getattr(trace, quantity).items(), key=lambda kv: str(kv[0])):
                arrays[f"trace/{t}/{quantity}/{address}"] = tensor.to(torch.float32).numpy()
                geometry[f"{t}/{address}"] = list(trace.geometry[address])
    meta = {
        "kind": "reference-context",
        "key": ctx.key(),
        "step_indices": list(ctx.step_indices),
        "geometry": geometry,
        "schedule": _schedule_to_json(ctx.schedule),
    }
    write_blob(path, CONTEXT_MAGIC, meta, arrays)


def load_reference_context(path, expect_key: dict | None = None) -> ReferenceContext:
    header, arrays = read_blob(path, CONTEXT_MAGIC)
    key = header["key"]
    if expect_key is not None and key != expect_key:
        raise DataError(f"reference cache key mismatch: cached {key}, expected {expect_key}")
    schedule = _schedule_from_json(header["schedule"])
    ctx = ReferenceContext(
        z0_R=torch.from_numpy(arrays.pop("z0_R")),
        shared_eps=torch.from_numpy(arrays.pop("shared_eps")),
        step_indices=tuple(header["step_indices"]),
        schedule=schedule,
        seed=key["seed"],
        extraction=key["extraction"],
        ref_hash=key["ref_hash"],
    )
    geometry = header["geometry"]
    for name, arr in arrays.items():
        _, t, quantity, addr_text = name.split("/")
        t = int(t)
        address = LayerAddress.parse(addr_text)
        trace = ctx.traces.setdefault(t, AttentionTrace())
        hw = tuple(geometry[f"{t}/{address}"])
        trace.store(address, quantity, torch.from_numpy(arr), hw)
    return ctx


def _schedule_to_json(schedule: InjectionSchedule) -> dict:
    return {
        "features": [[str(s.address), s.start, s.stop] for s in schedule.feature_sites],
        "self_attn": [[str(s.address), s.start, s.stop] for s in schedule.self_attn_sites],
    }


def _schedule_from_json(blob: dict) -> InjectionSchedule:
    feats = tuple(SiteRange(LayerAddress.parse(a), lo, hi) for a, lo, hi in blob["features"])
    attns = tuple(SiteRange(LayerAddress.parse(a), lo, hi) for a, lo, hi in blob["self_attn"])
    return InjectionSchedule(feats, attns)
