"""Three-path denoising loop: guidance update, injected/regulated CFG
denoise, DDIM step.

Per sampling step k at timestep t: (1) during the guided prefix, the
latent takes one energy-gradient update under the target prompt; (2) the
unconditional and conditional branches run with injection replacements
(both branches by default) and cross-attention regulation (conditional
branch only); (3) classifier-free combination; (4) deterministic DDIM
step. The initial latent is seeded standard normal; the reference
extraction stream is seeded with seed + 1 so the two draws stay distinct.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import Backbone, InterventionSet, LayerAddress, NULL_ID
from .config import RunConfig, Toggles
from .errors import EventGenError, NumericError, ParameterError, ShapeError
from .schedule import NoiseSchedule, cfg_combine, ddim_step
from .switching import (
    GuidanceConfig,
    energy_gradient,
    guidance_update,
    regulation_transform,
    validate_entities,
)
from .transfer import InjectionSchedule, ReferenceContext, build_interventions, prepare_reference

REFERENCE_SEED_OFFSET = 1


@dataclass
class ProbeRecord:
    step_index: int
    timestep: int
    address: LayerAddress
    quantity: str
    value: torch.Tensor
    hw: tuple[int, int]


class AttentionProbe:
    """Record-only collector attached to the conditional branch.

    Recording never changes outputs (hook transparency), so probed runs are
    byte-identical to unprobed ones.
    """

    def __init__(self, requests, steps=None):
        self.requests = set(requests)
        self.steps = None if steps is None else set(steps)
        self.records: list[ProbeRecord] = []

    def wants(self, step_index: int) -> bool:
        return self.steps is None or step_index in self.steps

    def collect(self, step_index: int, timestep: int, trace) -> None:
        for address, quantity in sorted(self.requests, key=lambda r: (str(r[0]), r[1])):
            self.records.append(
                ProbeRecord(
                    step_index,
                    timestep,
                    address,
                    quantity,
                    trace.get(address, quantity),
                    trace.geometry[address],
                )
            )


def _resolve_guidance(config: RunConfig, backbone: Backbone) -> GuidanceConfig:
    gcfg = config.guidance_config()
    if gcfg.energy_layers is None:
        gcfg = dataclasses.replace(gcfg, energy_layers=backbone.cross_attention_addresses())
    return gcfg


def _denoise_loop(
    prompt_tokens,
    config: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule,
    ctx: ReferenceContext | None,
    inj_schedule: InjectionSchedule | None,
    entities,
    probe: AttentionProbe | None,
    observer,
) -> np.ndarray:
    toggles = config.toggles
    prompt = backbone.embed_prompt(prompt_tokens)
    uncond = backbone.embed_prompt([NULL_ID] * len(prompt.token_ids))
    gcfg = _resolve_guidance(config, backbone)
    if gcfg.guidance_step_count > schedule.sampling_steps:
        raise ParameterError(
            f"guidance_step_count {gcfg.guidance_step_count} exceeds {schedule.sampling_steps} steps"
        )
    transform = None
    if toggles.regulation and entities:
        transform = regulation_transform(entities, config.regulation_renormalize)
    notify = observer or (lambda phase, k: None)

    gen = torch.Generator().manual_seed(config.seed)
    z = torch.randn(backbone.latent_shape, generator=gen, dtype=torch.float32)
    K = schedule.sampling_steps
    for k in range(K):
        t = schedule.step_indices[k]
        t_prev = schedule.step_indices[k + 1] if k + 1 < K else 0
        try:
            if toggles.guidance and entities and k < gcfg.guidance_step_count:
                grad = energy_gradient(z, t, prompt, entities, gcfg, backbone)
                z = guidance_update(z, grad, t, gcfg, schedule)
                if not torch.isfinite(z).all():
                    raise NumericError("guidance update produced non-finite latent")
                notify("guidance", k)
            if toggles.injection and ctx is not None:
                base = build_interventions(ctx, k, inj_schedule)
            else:
                base = InterventionSet()
            apply_regulation = transform is not None and (
                gcfg.regulate_all_steps or k < gcfg.guidance_step_count
            )
            record = probe.requests if (probe is not None and probe.wants(k)) else set()
            cond_iv = InterventionSet(
                record=set(record),
                replace_f=base.replace_f,
                replace_sa=base.replace_sa,
                transform_ca=transform if apply_regulation else None,
            )
            uncond_iv = (
                InterventionSet(replace_f=base.replace_f, replace_sa=base.replace_sa)
                if config.injection_branches == "both"
                else InterventionSet()
            )
            eps_u, _ = backbone.denoise_forward(z, t, uncond, uncond_iv)
            eps_c, trace_c = backbone.denoise_forward(z, t, prompt, cond_iv)
            notify("denoise", k)
            if probe is not None and probe.wants(k):
                probe.collect(k, t, trace_c)
            eps_hat = cfg_combine(eps_u, eps_c, config.cfg_scale)
            z = ddim_step(z, eps_hat, t, t_prev, schedule)
            notify("ddim", k)
        except EventGenError as exc:
            raise type(exc)(f"step {k} (t={t}): {exc}") from exc
    return backbone.decode_latent(z)


def customize(
    reference_image: np.ndarray,
    entities,
    prompt_tokens,
    config: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule | None = None,
    ctx: ReferenceContext | None = None,
    probe: AttentionProbe | None = None,
    observer=None,
) -> np.ndarray:
    """Generate one customized image from a reference and entity bindings."""
    schedule = schedule or config.noise_schedule()
    prompt = backbone.embed_prompt(prompt_tokens)
    validate_entities(entities, prompt.n_tokens, tuple(reference_image.shape[:2]))
    inj_schedule = None
    if config.toggles.injection:
        inj_schedule = config.injection_schedule()
        if inj_schedule.is_empty():
            inj_schedule = None
    if inj_schedule is not None and ctx is None:
        z0_ref = backbone.encode_image(reference_image)
        if tuple(z0_ref.shape) != backbone.latent_shape:
            raise ShapeError(
                f"reference latent {tuple(z0_ref.shape)} != generation latent {backbone.latent_shape}"
            )
        ctx = prepare_reference(
            reference_image,
            config.seed + REFERENCE_SEED_OFFSET,
            schedule,
            backbone,
            inj_schedule,
            extraction=config.reference_extraction,
            streaming=config.injection_streaming,
        )
    if inj_schedule is None:
        ctx = None
    return _denoise_loop(
        prompt_tokens, config, backbone, schedule, ctx, inj_schedule, list(entities), probe, observer
    )


def generate_baseline(
    prompt_tokens,
    config: RunConfig,
    backbone: Backbone,
    schedule: NoiseSchedule | None = None,
    probe: AttentionProbe | None = None,
    observer=None,
) -> np.ndarray:
    """Plain CFG sampling control arm: no guidance, regulation, or injection."""
    schedule = schedule or config.noise_schedule()
    plain = dataclasses.replace(config, toggles=Toggles(False, False, False))
    return _denoise_loop(prompt_tokens, plain, backbone, schedule, None, None, [], probe, observer)


TOGGLE_SET_NAMES = {
    "all-on": Toggles(True, True, True),
    "all-off": Toggles(False, False, False),
    "no-guidance": Toggles(False, True, True),
    "no-regulation": Toggles(True, False, True),
    "no-injection": Toggles(True, True, False),
}


def ablate(
    reference_image: np.ndarray,
    entities,
    prompt_tokens,
    config: RunConfig,
    toggle_sets,
    backbone: Backbone,
    schedule: NoiseSchedule | None = None,
    probes=None,
) -> list[np.ndarray]:
    """One customize run per toggle set, sharing the seed and the reference
    context across runs."""
    if not toggle_sets:
        raise ParameterError("toggle_sets must be nonempty")
    schedule = schedule or config.noise_schedule()
    ctx = None
    if any(t.injection for t in toggle_sets):
        inj_schedule = config.injection_schedule()
        if not inj_schedule.is_empty():
            ctx = prepare_reference(
                reference_image,
                config.seed + REFERENCE_SEED_OFFSET,
                schedule,
                backbone,
                inj_schedule,
                extraction=config.reference_extraction,
                streaming=config.injection_streaming,
            )
    images = []
    for i, toggles in enumerate(toggle_sets):
        run_cfg = dataclasses.replace(config, toggles=toggles)
        probe = probes[i] if probes is not None else None
        images.append(
            customize(
                reference_image,
                entities,
                prompt_tokens,
                run_cfg,
                backbone,
                schedule,
                ctx=ctx if toggles.injection else None,
                probe=probe,
            )
        )
    return images


def calibrate_eta(
    reference_image: np.ndarray,
    entities,
    prompt_tokens,
    config: RunConfig,
    backbone: Backbone,
    etas,
    n_seeds: int = 100,
    max_degenerate_fraction: float = 0.05,
) -> tuple[float, dict[float, float]]:
    """Pick the largest eta whose degenerate-run rate stays under the cap.

    A run is degenerate when it raises a numeric error or emits non-finite
    pixels. Returns (chosen eta, {eta: degenerate fraction}).
    """
    stats: dict[float, float] = {}
    chosen = None
    schedule = config.noise_schedule()
    for eta in sorted(etas):
        bad = 0
        for seed in range(n_seeds):
            run_cfg = dataclasses.replace(config, eta=float(eta), seed=seed)
            try:
                image = customize(reference_image, entities, prompt_tokens, run_cfg, backbone, schedule)
                if not np.isfinite(image).all():
                    bad += 1
            except NumericError:
                bad += 1
        frac = bad / n_seeds
        stats[float(eta)] = frac
        if frac < max_degenerate_fraction:
            chosen = float(eta)
    if chosen is None:
        raise NumericError(f"no eta in {sorted(etas)} kept degenerate runs under {max_degenerate_fraction}")
    return chosen, stats
