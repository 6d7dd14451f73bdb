"""Run configuration: flat namespaced key=value files, defaults, overrides.

Grammar: one `key = value` per line; `#` starts a comment; blank lines
ignored; values may contain spaces and `=`. Unknown keys are errors, so
typos never pass silently. Untouched defaults reproduce the published
inference recipe: 50 sampling steps, guidance on the first 10 steps at all
cross-attention layers, regulation on all steps, feature injection at
dec1:1 for all steps, self-attention injection at dec1:[1,2] and
dec2/dec3:[0,1,2] for the first half, classifier-free guidance scale 15.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import LayerAddress
from .errors import ConfigError
from .schedule import NoiseSchedule, build_schedule
from .switching import GuidanceConfig
from .transfer import InjectionSchedule, SiteRange, default_schedule

# Largest stable guidance scale from the calibration sweep on the shipped
# toy benchmark (see README); the source method reports no value.
DEFAULT_ETA = 40.0


@dataclass(frozen=True)
class Toggles:
    guidance: bool = True
    regulation: bool = True
    injection: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    weights: str = ""
    sampling_steps: int = 50
    train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"
    cfg_scale: float = 15.0
    eta: float = DEFAULT_ETA
    guidance_step_count: int = 10
    guidance_layers: str = "all"
    regulate_all_steps: bool = True
    regulation_renormalize: bool = False
    toggles: Toggles = field(default_factory=Toggles)
    injection_features: str = "default"
    injection_self_attn: str = "default"
    injection_branches: str = "both"
    injection_streaming: bool = False
    reference_extraction: str = "forward"
    reference_image: str = ""
    prompt_tokens: str = ""
    prompt_entities: str = ""

    def noise_schedule(self) -> NoiseSchedule:
        return build_schedule(
            self.train_timesteps,
            self.beta_start,
            self.beta_end,
            self.sampling_steps,
            self.schedule_kind,
        )

    def injection_schedule(self) -> InjectionSchedule:
        base = default_schedule(self.sampling_steps)
        features = (
            base.feature_sites
            if self.injection_features == "default"
            else parse_site_ranges(self.injection_features)
        )
        self_attn = (
            base.self_attn_sites
            if self.injection_self_attn == "default"
            else parse_site_ranges(self.injection_self_attn)
        )
        return InjectionSchedule(features, self_attn)

    def guidance_config(self) -> GuidanceConfig:
        layers = None
        if self.guidance_layers != "all":
            layers = tuple(
                LayerAddress.parse(part.strip()) for part in self.guidance_layers.split(",") if part.strip()
            )
        return GuidanceConfig(
            eta=self.eta,
            guidance_step_count=self.guidance_step_count,
            regulate_all_steps=self.regulate_all_steps,
            energy_layers=layers,
        )


_SITE_RE = re.compile(r"^(?P<block>enc\d+|mid|dec\d+):\[(?P<layers>\d+(?:,\d+)*)\]@(?P<lo>\d+)-(?P<hi>\d+)$")


def _split_outside_brackets(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def parse_site_ranges(text: str) -> tuple[SiteRange, ...]:
    """Parse e.g. "dec1:[1,2]@0-24,dec3:[0,1,2]@0-24" into site ranges."""
    text = text.strip()
    if text in ("", "none"):
        return ()
    sites = []
    for part in _split_outside_brackets(text):
        m = _SITE_RE.match(part)
        if m is None:
            raise ConfigError(f"bad injection site {part!r}; expected like dec1:[1,2]@0-24")
        for layer in m.group("layers").split(","):
            address = LayerAddress.parse(f"{m.group('block')}:{layer}")
            sites.append(SiteRange(address, int(m.group("lo")), int(m.group("hi"))))
    return tuple(sites)


def _block_prefix(address: LayerAddress) -> str:
    if address.section == "mid":
        return "mid"
    prefix = "enc" if address.section == "encoder" else "dec"
    return f"{prefix}{address.block}"


def format_site_ranges(sites: tuple[SiteRange, ...]) -> str:
    if not sites:
        return "none"
    return ",".join(f"{_block_prefix(s.address)}:[{s.address.layer}]@{s.start}-{s.stop}" for s in sites)


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def _fmt_bool(value: bool) -> str:
    return "on" if value else "off"


# key -> (attribute path, parser, formatter)
_KEYS = {
    "seed": ("seed", int, str),
    "weights": ("weights", str, str),
    "sampler.steps": ("sampling_steps", int, str),
    "sampler.train_timesteps": ("train_timesteps", int, str),
    "sampler.beta_start": ("beta_start", float, repr),
    "sampler.beta_end": ("beta_end", float, repr),
    "sampler.kind": ("schedule_kind", str, str),
    "cfg.scale": ("cfg_scale", float, repr),
    "guidance.eta": ("eta", float, repr),
    "guidance.steps": ("guidance_step_count", int, str),
    "guidance.layers": ("guidance_layers", str, str),
    "regulation.all_steps": ("regulate_all_steps", _parse_bool, _fmt_bool),
    "regulation.renormalize": ("regulation_renormalize", _parse_bool, _fmt_bool),
    "toggles.guidance": ("toggles.guidance", _parse_bool, _fmt_bool),
    "toggles.regulation": ("toggles.regulation", _parse_bool, _fmt_bool),
    "toggles.injection": ("toggles.injection", _parse_bool, _fmt_bool),
    "injection.features": ("injection_features", str, str),
    "injection.self_attn": ("injection_self_attn", str, str),
    "injection.branches": ("injection_branches", str, str),
    "injection.streaming": ("injection_streaming", _parse_bool, _fmt_bool),
    "reference.extraction": ("reference_extraction", str, str),
    "reference.image": ("reference_image", str, str),
    "prompt.tokens": ("prompt_tokens", str, str),
    "prompt.entities": ("prompt_entities", str, str),
}

_VALID_CHOICES = {
    "injection.branches": ("both", "cond"),
    "reference.extraction": ("forward", "inversion"),
    "sampler.kind": ("linear",),
}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return apply_overrides(base or RunConfig(), pairs)


def apply_overrides(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    updates: dict[str, object] = {}
    toggles = dict(
        guidance=config.toggles.guidance,
        regulation=config.toggles.regulation,
        injection=config.toggles.injection,
    )
    for key, value in pairs.items():
        if key == "toggles.all":
            flag = _parse_bool(value)
            toggles = dict(guidance=flag, regulation=flag, injection=flag)
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _VALID_CHOICES and value not in _VALID_CHOICES[key]:
            raise ConfigError(f"{key}: {value!r} not in {_VALID_CHOICES[key]}")
        attr, parse, _ = _KEYS[key]
        try:
            parsed = parse(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from exc
        if attr.startswith("toggles."):
            toggles[attr.split(".", 1)[1]] = parsed
        else:
            updates[attr] = parsed
    updates["toggles"] = Toggles(**toggles)
    return dataclasses.replace(config, **updates)


def config_to_text(config: RunConfig) -> str:
    lines = []
    for key in sorted(_KEYS):
        attr, _, fmt = _KEYS[key]
        if attr.startswith("toggles."):
            value = getattr(config.toggles, attr.split(".", 1)[1])
        else:
            value = getattr(config, attr)
        lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base)
