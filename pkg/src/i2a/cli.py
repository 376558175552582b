"""Command line entry point: ``i2a <subcommand> --config run.yaml ...``.

The config is a flat YAML/JSON mapping. Keys named like :class:`AttackConfig`
fields override the attack defaults; the rest pick the dataset and adapters::

    dataset: synthetic            # or a CSV / JSON-lines manifest
    synthetic_n: 50
    image_size: 256               # manifest images are resized to this square
    backend: mock                 # or "package.module:factory"
    classifier: toy               # toy | tint | torchvision:<arch> | package.module:factory
    phi: random-conv              # random-conv | identity | alexnet
    attack: i2a                   # i2a | benign | clean | fgsm | pgd | mim | registered plugin
    prompts: builtin              # builtin | generated | list of strings
    lam: 100
    gamma: 0.3
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import torch
import yaml

from i2a import baselines
from i2a.attack import AttackConfig, BenignEdit, I2A, project
from i2a.harness import (
    Dataset,
    EvalSettings,
    ablate,
    evaluate_transfer,
    evaluate_whitebox,
    load_image,
    make_synthetic_dataset,
    save_png,
    slugify,
    train_toy_classifier,
    write_records,
)
from i2a.instructions import (
    ChatCompletionClient,
    HTTPCaptioner,
    InstructionCache,
    InstructionGenerator,
    PromptTemplate,
    builtin_prompts,
    load_examples,
)
from i2a.models import LinearClassifier, MockBackend, TorchClassifier, classify, load_object
from i2a.perceptual import AlexNetFeatures, IdentityFeatures, RandomConvFeatures, lpips_distance
from i2a.sampler import GuidanceFactors, initial_noise

log = logging.getLogger("i2a")

ATTACK_FIELDS = {f.name for f in dataclasses.fields(AttackConfig)}


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise SystemExit(f"{path}: config must be a flat mapping")
    return data


def attack_config(cfg: dict, seed: Optional[int]) -> AttackConfig:
    fields = {k: v for k, v in cfg.items() if k in ATTACK_FIELDS}
    if "lambda" in cfg:
        fields["lam"] = cfg["lambda"]
    if seed is not None:
        fields["seed"] = seed
    return AttackConfig(**fields)


def build_dataset(cfg: dict) -> Dataset:
    source = cfg.get("dataset", "synthetic")
    if source == "synthetic":
        return make_synthetic_dataset(int(cfg.get("synthetic_n", 50)), int(cfg.get("synthetic_size", 16)),
                                      int(cfg.get("num_classes", 3)), int(cfg.get("synthetic_seed", 2)))
    size = int(cfg.get("image_size", 256))
    return Dataset.from_manifest(source, size=(size, size), dtype=torch.float64)


def image_shape(cfg: dict) -> tuple[int, int, int]:
    if cfg.get("dataset", "synthetic") == "synthetic":
        s = int(cfg.get("synthetic_size", 16))
    else:
        s = int(cfg.get("image_size", 256))
    return (s, s, 3)


def build_backend(cfg: dict, steps: int):
    spec = cfg.get("backend", "mock")
    if spec == "mock":
        shape = image_shape(cfg)
        encoder = cfg.get("mock_encoder", "auto")
        if encoder == "auto":
            encoder = "orthogonal" if shape[0] * shape[1] * shape[2] <= 4096 else "identity"
        return MockBackend(shape, steps, encoder=encoder,
                           edit_strength=float(cfg.get("mock_edit_strength", 0.03)),
                           seed=int(cfg.get("mock_seed", 0)))
    return load_object(spec)(cfg)


def tint_classifier(shape, num_classes: int = 3, scale: float = 40.0) -> LinearClassifier:
    """Untrained linear scorer of the mean tint of channel ``k % 3``; matches the synthetic data."""
    h, w, c = shape
    weight = torch.zeros(num_classes, h, w, c, dtype=torch.float64)
    for k in range(num_classes):
        weight[k, :, :, k % c] = scale / (h * w)
    weight = weight.reshape(num_classes, -1)
    return LinearClassifier(weight, -0.5 * weight.sum(1))


def build_classifier(spec: str, cfg: dict):
    if spec == "toy":
        train = make_synthetic_dataset(int(cfg.get("toy_train_n", 300)), int(cfg.get("synthetic_size", 16)),
                                       int(cfg.get("num_classes", 3)), int(cfg.get("toy_train_seed", 1)))
        return train_toy_classifier(train, int(cfg.get("num_classes", 3)), int(cfg.get("toy_epochs", 200)))
    if spec == "tint":
        return tint_classifier(image_shape(cfg), int(cfg.get("num_classes", 3)), float(cfg.get("tint_scale", 40.0)))
    if spec.startswith("torchvision:"):
        import torchvision

        arch = spec.split(":", 1)[1]
        weights = cfg.get("classifier_weights")
        net = getattr(torchvision.models, arch)(weights=None)
        if weights:
            net.load_state_dict(torch.load(weights, map_location="cpu"))
        return TorchClassifier(net, mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225],
                               input_size=(224, 224))
    return load_object(spec)(cfg)


def build_phi(cfg: dict):
    spec = cfg.get("phi", "random-conv")
    if spec == "random-conv":
        return RandomConvFeatures(3, seed=int(cfg.get("phi_seed", 0)))
    if spec == "identity":
        return IdentityFeatures()
    if spec == "alexnet":
        return AlexNetFeatures(cfg.get("lpips_weights", "DEFAULT"))
    return load_object(spec)(cfg)


def build_defense(spec: str):
    if spec in ("identity", "none"):
        return baselines.IdentityDefense()
    if spec.startswith("gaussian"):
        _, _, sigma = spec.partition(":")
        return baselines.GaussianNoiseDefense(float(sigma or 0.05))
    return load_object(spec)()


def build_attack(cfg: dict, config: AttackConfig, backend, phi):
    name = cfg.get("attack", "i2a")
    if name == "i2a":
        attack = I2A(backend, phi, config)
    elif name == "benign":
        attack = BenignEdit(backend, phi, config)
    elif name in baselines.ATTACKS:
        options = cfg.get("attack_options", {}) or {}
        attack = baselines.ATTACKS[name](**options)
    else:
        raise SystemExit(f"unknown attack {name!r}")
    if cfg.get("defense"):
        attack = baselines.adaptive(attack, build_defense(cfg["defense"]), int(cfg.get("eot_samples", 16)),
                                    int(cfg.get("adaptive_max_iters", 50)), config.seed)
    return attack


def build_generator(cfg: dict, offline: bool) -> InstructionGenerator:
    cache = InstructionCache(cfg.get("instruction_cache", "instructions.json"))
    llm = captioner = None
    if not offline:
        if cfg.get("llm_endpoint"):
            llm = ChatCompletionClient(cfg["llm_endpoint"], cfg.get("llm_model", "gpt-4"),
                                       temperature=float(cfg.get("llm_temperature", 0.0)))
        if cfg.get("caption_endpoint"):
            captioner = HTTPCaptioner(cfg["caption_endpoint"])
    template = PromptTemplate()
    if cfg.get("few_shot_extra"):
        template.extra_examples = load_examples(cfg["few_shot_extra"])
    return InstructionGenerator(llm, captioner, template, cache, offline=offline,
                                max_in_flight=int(cfg.get("max_in_flight", 4)))


def resolve_prompts(cfg: dict, dataset: Optional[Dataset] = None, offline: bool = False):
    """``builtin``, a single string, a list, or ``generated`` (one instruction per image-id)."""
    prompts = cfg.get("prompts", "builtin")
    if prompts == "builtin":
        return [p.text for p in builtin_prompts()]
    if prompts == "generated":
        generator = build_generator(cfg, offline)
        items = [{"image_id": it.image_id, "category": it.category, "caption": it.caption,
                  "image": None if (offline or it.caption) else dataset.image(it)} for it in dataset.items]
        return {k: [v.text] for k, v in generator.generate_many(items).items()}
    if isinstance(prompts, str):
        return [prompts]
    return [str(p) for p in prompts]


def _settings(cfg: dict, args, config: AttackConfig, out: Optional[Path]) -> EvalSettings:
    return EvalSettings(seed=config.seed, gamma=config.gamma, workers=args.workers or int(cfg.get("workers", 1)),
                        out_dir=out)


def _finish(table, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    write_records(table.records, out / "records.jsonl")
    table.write_csv(out / "report.csv")
    for row in table.rows:
        log.info("%s", json.dumps(row, default=str))
    if table.has_errors:
        log.error("%d item(s) failed; see records.jsonl", sum(r.error is not None for r in table.records))
        return 1
    return 0


def cmd_attack(args, cfg) -> int:
    config = attack_config(cfg, args.seed)
    backend = build_backend(cfg, config.steps)
    phi = build_phi(cfg)
    classifier = build_classifier(cfg.get("classifier", "toy"), cfg)
    x = load_image(args.image, backend.image_shape[:2], backend.dtype)
    attack = build_attack(cfg, config, backend, phi)
    out = attack(x, args.label, classifier, instruction=args.instruction, seed=config.seed)
    image = getattr(out, "adversarial", out)
    d = float(lpips_distance(image, x, phi))
    summary = {
        "predicted": classify(classifier, image),
        "label": args.label,
        "lpips": d,
        "constraint_met": d <= config.gamma + 1e-9,
        "iterations": getattr(out, "iterations", None),
        "projected": getattr(out, "projected", None),
        "proj_scales": getattr(out, "proj_scales", None),
    }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(image, out_dir / f"{Path(args.image).stem}__{slugify(args.instruction)}.png")
    print(json.dumps(summary))
    return 0


def cmd_evaluate(args, cfg) -> int:
    config = attack_config(cfg, args.seed)
    dataset = build_dataset(cfg)
    backend = build_backend(cfg, config.steps)
    phi = build_phi(cfg)
    classifier = build_classifier(cfg.get("classifier", "toy"), cfg)
    attack = build_attack(cfg, config, backend, phi)
    out = Path(args.out)
    table = evaluate_whitebox(dataset, attack, resolve_prompts(cfg, dataset, args.offline), classifier, phi,
                              _settings(cfg, args, config, out), model_name=cfg.get("model_name", "model"))
    return _finish(table, out)


def cmd_transfer(args, cfg) -> int:
    config = attack_config(cfg, args.seed)
    dataset = build_dataset(cfg)
    backend = build_backend(cfg, config.steps)
    phi = build_phi(cfg)
    models = cfg.get("models") or {"model": cfg.get("classifier", "toy")}
    built = {name: build_classifier(spec, cfg) for name, spec in models.items()}
    sources = {k: built[k] for k in cfg.get("sources", list(built))}
    targets = {k: built[k] for k in cfg.get("targets", list(built))}
    attack = build_attack(cfg, config, backend, phi)
    out = Path(args.out)
    table = evaluate_transfer(dataset, attack, resolve_prompts(cfg, dataset, args.offline), sources, targets,
                              phi, _settings(cfg, args, config, out))
    srcs, tgts, mat = table.transfer_matrix()
    print("source\\target," + ",".join(tgts))
    for s, row in zip(srcs, mat):
        print(s + "," + ",".join(f"{v:.2f}" for v in row))
    return _finish(table, out)


def cmd_ablate(args, cfg) -> int:
    config = attack_config(cfg, args.seed)
    dataset = build_dataset(cfg)
    backend = build_backend(cfg, config.steps)
    phi = build_phi(cfg)
    classifier = build_classifier(cfg.get("classifier", "toy"), cfg)
    if args.param == "alpha_beta":
        values = [(a == "1", b == "1") for a, b in (v.strip() for v in args.values.split(","))]
    else:
        values = [float(v) for v in args.values.split(",")]
    table = ablate(args.param, values, dataset, lambda c: I2A(backend, phi, c), config,
                   resolve_prompts(cfg, dataset, args.offline), classifier, phi, _settings(cfg, args, config, None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(table.records, out / "records.jsonl")
    table.write_csv(out / "report.csv")
    for row in table.rows:
        print(json.dumps(row, default=str))
    return 1 if table.has_errors else 0


def cmd_gen_instructions(args, cfg) -> int:
    dataset = build_dataset(cfg)
    generator = build_generator(cfg, args.offline)
    failures = 0
    for item in dataset.items:
        try:
            image = None if (args.offline or item.caption) else dataset.image(item)
            inst = generator.instruction_for(item.image_id, image, item.category or "", item.caption)
            print(json.dumps({"image_id": item.image_id, "instruction": inst.text}))
        except Exception as exc:  # noqa: BLE001 - reported, loop continues
            failures += 1
            log.error("%s: %s", item.image_id, exc)
    return 1 if failures else 0


def cmd_project(args, cfg) -> int:
    config = attack_config(cfg, args.seed)
    backend = build_backend(cfg, config.steps)
    phi = build_phi(cfg)
    x = load_image(args.image, backend.image_shape[:2], backend.dtype)
    if args.factors:
        saved = torch.load(args.factors)
        factors = GuidanceFactors(saved["alpha"].to(backend.dtype), saved["beta"].to(backend.dtype))
    else:
        factors = GuidanceFactors.ones(backend.latent_shape, backend.dtype)
    z_T, noise = initial_noise(config.seed, backend.schedule.steps, backend.latent_shape,
                               backend.schedule.sigma_max, backend.dtype)
    result = project(x, z_T, factors, args.instruction, backend, phi, config.gamma, config, noise)
    summary = {"success": result.success, "s_image": result.s_image, "s_text": result.s_text,
               "lpips": result.distance if result.success else None}
    if result.success:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_png(result.image, out_dir / f"{Path(args.image).stem}__{slugify(args.instruction)}.png")
    print(json.dumps(summary))
    return 0 if result.success else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2a", description="Language-guided semantic adversarial attacks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML/JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--offline", action="store_true", help="never contact remote model services")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", parents=[common], help="attack a single image")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--label", type=int, required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", parents=[common], help="white-box evaluation over a dataset")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer", parents=[common], help="source x target transferability matrix")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablate", parents=[common], help="sweep lambda, gamma or the alpha/beta switches")
    p.add_argument("--param", required=True, choices=["lambda", "gamma", "alpha_beta"])
    p.add_argument("--values", required=True, help="comma separated; for alpha_beta use e.g. 00,01,10,11")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-instructions", parents=[common], help="caption images and generate edit instructions")
    p.set_defaults(func=cmd_gen_instructions)

    p = sub.add_parser("project", parents=[common], help="project one edit back into the LPIPS budget")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--factors", help="torch file with 'alpha' and 'beta' tensors (default all-ones)")
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
