"""Command-line surface.

Commands: train-toy, make-data, generate, ablate, bench, inspect-attn.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
Every nonzero exit prints a one-line diagnostic to stderr. `generate`
writes a run manifest (full resolved config) next to the output; rerunning
with `--config <manifest>` reproduces the output byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, load_weights, save_weights, train_toy
from .config import RunConfig, Toggles, apply_overrides, config_to_text, load_config
from .errors import EventGenError, UsageError
from .evalbench import (
    ColorLabelModel,
    attention_leakage,
    embed_image,
    ingest_benchmark,
    layout_fidelity,
    make_toy_benchmark,
    recall_at_k,
    sample_entities,
    sample_prompt,
    structure_correlation,
)
from .images import load_image, load_mask, save_image
from .pipeline import (
    TOGGLE_SET_NAMES,
    AttentionProbe,
    ablate,
    customize,
    generate_baseline,
)
from .backbone.hooks import LayerAddress
from .switching import EntitySpec
from .toydata import ToyDataset, make_training_dataset

CONFIG_ENV_VAR = "EVENTGEN_CONFIG"


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    log_path: str | None = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); our contract is 1
        raise UsageError(message)


# --- prompt / entity binding -------------------------------------------------


def parse_prompt_spec(spec: str, mask_files: list[str], backbone: Backbone):
    """Parse "words | e1=mask.png:tokensA-B, ..." into token ids + entities.

    The start token is prepended to the words automatically; spans index the
    final token sequence. Bindings without an explicit mask file consume
    entries of --masks in order.
    """
    if "|" in spec:
        words, bindings_text = spec.split("|", 1)
    else:
        words, bindings_text = spec, ""
    token_ids = [1] + backbone.text.tokenize(words)  # <start> + words
    entities = []
    remaining = list(mask_files)
    bindings = [b.strip() for b in bindings_text.split(",") if b.strip()]
    for binding in bindings:
        if "=" not in binding:
            raise UsageError(f"bad entity binding {binding!r}; expected e<i>=[mask:]tokensA-B")
        name, rest = binding.split("=", 1)
        name = name.strip()
        if not name.startswith("e") or not name[1:].isdigit():
            raise UsageError(f"bad entity name {name!r}; expected e1, e2, ...")
        if ":" in rest:
            mask_path, span_text = rest.rsplit(":", 1)
        else:
            mask_path, span_text = "", rest
        if not span_text.startswith("tokens") or "-" not in span_text[6:]:
            raise UsageError(f"bad token span {span_text!r}; expected tokensA-B")
        lo_text, hi_text = span_text[6:].split("-", 1)
        try:
            span = (int(lo_text), int(hi_text))
        except ValueError:
            raise UsageError(f"bad token span {span_text!r}")
        if not mask_path:
            if not remaining:
                raise UsageError(
                    f"binding {name} has no mask file and --masks is exhausted "
                    f"({len(mask_files)} provided for {len(bindings)} bindings)"
                )
            mask_path = remaining.pop(0)
        mask = load_mask(mask_path)
        entities.append((EntitySpec(int(name[1:]), span, mask), str(Path(mask_path).resolve())))
    if remaining:
        raise UsageError(f"{len(remaining)} --masks entries unused by the bindings")
    specs = [e for e, _ in entities]
    resolved = ", ".join(
        f"e{e.entity_id}={path}:tokens{e.token_span[0]}-{e.token_span[1]}" for e, path in entities
    )
    return token_ids, specs, resolved


def _entities_from_config(config: RunConfig, backbone: Backbone):
    token_ids, specs, _ = parse_prompt_spec(
        f"{config.prompt_tokens} | {config.prompt_entities}" if config.prompt_entities else config.prompt_tokens,
        [],
        backbone,
    )
    return token_ids, specs


# --- shared option handling --------------------------------------------------


def _add_set_opt(parser):
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def _resolve_config(args) -> RunConfig:
    config = RunConfig()
    config_path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    if config_path:
        config = load_config(config_path)
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _load_backbone(args, config: RunConfig) -> tuple[Backbone, str]:
    weights = getattr(args, "weights", None) or config.weights
    if not weights:
        raise UsageError("no weights: pass --weights or set the `weights` config key (train with `eventgen train-toy`)")
    backbone = load_weights(weights)
    return backbone, str(Path(weights).resolve())


def _gather_run_inputs(args, config: RunConfig, backbone: Backbone):
    """Resolve reference image, prompt tokens, and entities from flags/config."""
    ref_path = getattr(args, "ref", None) or config.reference_image
    if not ref_path:
        raise UsageError("no reference image: pass --ref or set reference.image")
    reference = load_image(ref_path)
    mask_files = []
    if getattr(args, "masks", None):
        mask_files = [m for m in args.masks.split(",") if m]
    prompt_spec = getattr(args, "prompt", None)
    if prompt_spec:
        token_ids, entities, resolved_bindings = parse_prompt_spec(prompt_spec, mask_files, backbone)
        words = prompt_spec.split("|", 1)[0].strip()
    else:
        if mask_files:
            raise UsageError("--masks given without --prompt bindings")
        if not config.prompt_tokens:
            raise UsageError("no prompt: pass --prompt or set prompt.tokens")
        token_ids, entities = _entities_from_config(config, backbone)
        words = config.prompt_tokens
        resolved_bindings = config.prompt_entities
    if config.toggles.guidance and not entities:
        raise UsageError("guidance is on but no entity masks are bound; pass --masks/bindings or toggle guidance off")
    config = apply_overrides(
        config,
        {
            "reference.image": str(Path(ref_path).resolve()),
            "prompt.tokens": words,
            "prompt.entities": resolved_bindings,
        },
    )
    return reference, token_ids, entities, config


# --- commands ----------------------------------------------------------------


def cmd_make_data(args) -> CommandResult:
    root = make_training_dataset(args.out, n_images=args.images, size=args.size, seed=args.seed)
    print(f"wrote toy training dataset under {root}")
    return CommandResult(0, artifacts=[str(root / "labels.tsv")])


def cmd_train_toy(args) -> CommandResult:
    torch.set_num_threads(args.threads)
    dataset = ToyDataset.load(args.data)
    backbone = Backbone(init_seed=args.init_seed)
    result = train_toy(
        backbone,
        dataset,
        steps=args.steps,
        seed=args.seed,
        batch_size=args.batch_size,
        lr=args.lr,
    )
    save_weights(backbone, args.out)
    loss_csv = args.loss_csv or (str(args.out) + ".loss.csv")
    with open(loss_csv, "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(result.loss_history):
            fh.write(f"{i},{loss:.8f}\n")
    print(f"trained {args.steps} steps on {len(dataset)} samples -> {args.out}")
    return CommandResult(0, artifacts=[str(args.out), loss_csv], log_path=loss_csv)


def cmd_generate(args) -> CommandResult:
    torch.set_num_threads(args.threads)
    config = _resolve_config(args)
    backbone, weights_path = _load_backbone(args, config)
    reference, token_ids, entities, config = _gather_run_inputs(args, config, backbone)
    config = apply_overrides(config, {"weights": weights_path})
    image = customize(reference, entities, token_ids, config, backbone)
    save_image(args.out, image)
    manifest_path = str(args.out) + ".manifest"
    Path(manifest_path).write_text(config_to_text(config))
    print(f"wrote {args.out}")
    return CommandResult(0, artifacts=[str(args.out), manifest_path], log_path=manifest_path)


def _ablate_metrics(args, config, backbone, reference, token_ids, entities, toggles_list, names):
    """One row of aggregate metrics per toggle set over the seed sweep."""
    ca_sites = backbone.cross_attention_addresses()
    rows = {name: {"layout_fidelity": [], "structure_corr": [], "leakage": []} for name in names}
    images_first_seed = None
    model = ColorLabelModel()
    for seed_offset in range(args.seeds):
        run_cfg = dataclasses.replace(config, seed=config.seed + seed_offset)
        probes = [AttentionProbe({(a, "ca") for a in ca_sites}) for _ in toggles_list]
        images = ablate(reference, entities, token_ids, run_cfg, toggles_list, backbone, probes=probes)
        if images_first_seed is None:
            images_first_seed = images
        for name, image, probe in zip(names, images, probes):
            fid = layout_fidelity(image, entities, token_ids, model)
            rows[name]["layout_fidelity"].append(fid.score)
            rows[name]["structure_corr"].append(structure_correlation(image, reference))
            rows[name]["leakage"].append(attention_leakage(probe.records, entities))
    return rows, images_first_seed


def cmd_ablate(args) -> CommandResult:
    torch.set_num_threads(args.threads)
    config = _resolve_config(args)
    backbone, _ = _load_backbone(args, config)
    reference, token_ids, entities, config = _gather_run_inputs(args, config, backbone)
    names = [n.strip() for n in args.toggles.split(",") if n.strip()]
    for name in names:
        if name not in TOGGLE_SET_NAMES:
            raise UsageError(f"unknown toggle set {name!r}; valid: {', '.join(sorted(TOGGLE_SET_NAMES))}")
    toggles_list = [TOGGLE_SET_NAMES[n] for n in names]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, images = _ablate_metrics(args, config, backbone, reference, token_ids, entities, toggles_list, names)
    artifacts = []
    for name, image in zip(names, images):
        path = out_dir / f"{name}.png"
        save_image(path, image)
        artifacts.append(str(path))
    table_path = out_dir / "metrics.tsv"
    with open(table_path, "w") as fh:
        fh.write("toggles\tlayout_fidelity\tstructure_corr\tleakage\tseeds\n")
        for name in names:
            r = rows[name]
            fh.write(
                f"{name}\t{np.mean(r['layout_fidelity']):.4f}\t{np.mean(r['structure_corr']):.4f}"
                f"\t{np.mean(r['leakage']):.4f}\t{args.seeds}\n"
            )
    artifacts.append(str(table_path))
    print(table_path.read_text().rstrip())
    return CommandResult(0, artifacts=artifacts, log_path=str(table_path))


def _bench_generate_one(root, sample, config, backbone, out_dir, base_seed, index):
    entities = sample_entities(root, sample)
    token_ids = sample_prompt(sample)
    reference = load_image(Path(root) / sample.image_path)
    run_cfg = dataclasses.replace(config, seed=base_seed + index)
    image = customize(reference, entities, token_ids, run_cfg, backbone)
    out_path = Path(out_dir) / f"{sample.sample_id}.png"
    save_image(out_path, image)
    return str(out_path)


def cmd_bench(args) -> CommandResult:
    torch.set_num_threads(args.threads)
    modes = [bool(args.make_toy), bool(args.generate), bool(args.evaluate)]
    if sum(modes) != 1:
        raise UsageError("bench needs exactly one of --make-toy DIR, --generate DIR, --evaluate DIR")
    if args.make_toy:
        root = make_toy_benchmark(
            args.make_toy, n_classes=args.classes, n_refs=args.refs, size=args.size, seed=args.seed
        )
        print(f"wrote toy benchmark under {root}")
        return CommandResult(0, artifacts=[str(root / "manifest.tsv")])

    if args.generate:
        if not args.out_dir:
            raise UsageError("bench --generate needs --out-dir")
        config = _resolve_config(args)
        backbone, _ = _load_backbone(args, config)
        report = ingest_benchmark(args.generate)
        if report.errors:
            for lineno, message in report.errors:
                print(f"manifest line {lineno}: {message}", file=sys.stderr)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        samples = sorted(report.samples, key=lambda s: s.sample_id)
        jobs = max(1, args.jobs)
        if jobs == 1:
            paths = [
                _bench_generate_one(args.generate, sample, config, backbone, out_dir, args.seed, i)
                for i, sample in enumerate(samples)
            ]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                paths = list(
                    pool.map(
                        lambda pair: _bench_generate_one(
                            args.generate, pair[1], config, backbone, out_dir, args.seed, pair[0]
                        ),
                        enumerate(samples),
                    )
                )
        print(f"generated {len(paths)} target images under {out_dir}")
        return CommandResult(0, artifacts=paths)

    if not args.gen_dir:
        raise UsageError("bench --evaluate needs --gen-dir")
    report = ingest_benchmark(args.evaluate)
    if report.errors:
        for lineno, message in report.errors:
            print(f"manifest line {lineno}: {message}", file=sys.stderr)
    ks = [int(k) for k in args.ks.split(",") if k]
    root = Path(args.evaluate)
    references = []
    targets = []
    for sample in sorted(report.samples, key=lambda s: s.sample_id):
        ref_vec = embed_image(load_image(root / sample.image_path), args.encoder)
        references.append((ref_vec, sample.sample_id, sample.event_class))
        gen_path = Path(args.gen_dir) / f"{sample.sample_id}.png"
        if gen_path.exists():
            targets.append((embed_image(load_image(gen_path), args.encoder), sample.sample_id, sample.event_class))
    if not targets:
        raise UsageError(f"no generated images matching sample ids under {args.gen_dir}")
    result = recall_at_k(targets, references, ks)
    lines = result.lines()
    header = "k".ljust(8) + "recall"
    print(header)
    for k in sorted(result.recall_at):
        print(f"{k:<8}{result.recall_at[k]:.4f}")
    artifacts = []
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        artifacts.append(args.out)
    return CommandResult(0, artifacts=artifacts, log_path=args.out)


def cmd_inspect_attn(args) -> CommandResult:
    torch.set_num_threads(args.threads)
    config = _resolve_config(args)
    backbone, _ = _load_backbone(args, config)
    reference, token_ids, entities, config = _gather_run_inputs(args, config, backbone)
    try:
        site = LayerAddress.parse(args.site)
        info = backbone.layer_info(site)
    except EventGenError:
        valid = ", ".join(str(a) for a in backbone.attention_addresses())
        raise UsageError(f"invalid site {args.site!r}; valid attention sites: {valid}")
    if not info.with_attention:
        valid = ", ".join(str(a) for a in backbone.attention_addresses())
        raise UsageError(f"site {args.site} has no attention; valid attention sites: {valid}")
    steps = sorted(int(v) for v in args.steps.split(",") if v)
    probe = AttentionProbe({(site, "ca"), (site, "sa")}, steps=steps)
    image = customize(reference, entities, token_ids, config, backbone, probe=probe)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_path = out_dir / "image.png"
    save_image(image_path, image)
    artifacts = [str(image_path)]
    scales = []
    for rec in probe.records:
        mean_map = rec.value.numpy().mean(axis=0)  # head-mean
        if rec.quantity == "ca":
            for tok in range(mean_map.shape[1]):
                grid = mean_map[:, tok].reshape(rec.hw)
                name = f"ca_step{rec.step_index:03d}_tok{tok}.png"
                scales.append(_write_heatmap(out_dir / name, grid))
                artifacts.append(str(out_dir / name))
        else:
            name = f"sa_step{rec.step_index:03d}.png"
            scales.append(_write_heatmap(out_dir / name, mean_map))
            artifacts.append(str(out_dir / name))
    sidecar = out_dir / "scales.txt"
    sidecar.write_text("\n".join(scales) + "\n")
    artifacts.append(str(sidecar))
    print(f"wrote {len(artifacts)} files under {out_dir}")
    return CommandResult(0, artifacts=artifacts, log_path=str(sidecar))


def _write_heatmap(path, grid: np.ndarray) -> str:
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi - lo < 1e-12 else (grid - lo) / (hi - lo)
    save_image(path, np.repeat(scaled[:, :, None], 3, axis=2))
    return f"{Path(path).name}\tmin={lo:.6g}\tmax={hi:.6g}"


# --- parser ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="eventgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate the synthetic shapes training dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=4000)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("train-toy", help="train the toy denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("generate", help="run event customization")
    p.add_argument("--ref", default=None)
    p.add_argument("--masks", default=None, help="comma-separated mask files")
    p.add_argument("--prompt", default=None, help='"words | e1=mask:tokensA-B, ..."')
    p.add_argument("--config", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_set_opt(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("ablate", help="toggle-set ablations with a metrics table")
    p.add_argument("--ref", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--prompt", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--toggles", default="all-on,no-guidance,no-regulation,no-injection")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    _add_set_opt(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="toy benchmark: build, generate targets, evaluate retrieval")
    p.add_argument("--make-toy", default=None, metavar="DIR")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--refs", type=int, default=20)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--generate", default=None, metavar="DIR", help="benchmark dir to generate targets for")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--evaluate", default=None, metavar="DIR")
    p.add_argument("--gen-dir", default=None)
    p.add_argument("--encoder", default="downsample16")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    _add_set_opt(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect-attn", help="dump attention heatmaps at a site")
    p.add_argument("--ref", default=None)
    p.add_argument("--masks", default=None)
    p.add_argument("--prompt", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--site", required=True)
    p.add_argument("--steps", default="0")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_set_opt(p)
    p.set_defaults(fn=cmd_inspect_attn)

    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except EventGenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(exc.exit_code)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
