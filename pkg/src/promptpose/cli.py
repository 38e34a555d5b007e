"""Command-line interface.

Subcommands: ingest, train, eval, interpolate-texts, synth-prompts, parse,
score-parsing, plot-heatmaps, make-benchmark.  All errors exit nonzero;
invalid config keys exit 2 naming the key.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import auxgen, corpus, diverseprompt, harness, synthetic
from .errors import ConfigError, PromptPoseError
from .gateway import LLMGateway


def _add_llm_flags(p):
    p.add_argument("--llm-mode", choices=["live", "record", "replay", "mock"],
                   default="mock")
    p.add_argument("--llm-cache", default=None, help="transcript cache path")
    p.add_argument("--llm-model", default="gpt-3.5-turbo")


def _build_gateway(args, mock_handler=None):
    return LLMGateway(mode=args.llm_mode, cache_path=args.llm_cache,
                      mock_handler=mock_handler)


def _load_config(path):
    if path is None:
        return harness.RunConfig()
    with open(path) as f:
        return harness.RunConfig.from_dict(json.load(f))


def cmd_ingest(args):
    ds = corpus.load_dataset(args.manifest)
    counts = {s: len(v) for s, v in ds.by_species.items()}
    print(json.dumps({"instances": len(ds), "species": len(counts),
                      "per_species": counts,
                      "keypoints": list(ds.schema.names)}, indent=2))
    return 0


def cmd_make_benchmark(args):
    path = synthetic.generate_benchmark(args.out, per_species=args.per_species,
                                        seed=args.seed)
    print(path)
    return 0


def _synthetic_paths(species):
    return synthetic.interpolation_paths(f"a {species}")


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.episodes is not None:
        cfg.train_episodes = args.episodes
    cfg.llm_mode = args.llm_mode
    ds = corpus.load_dataset(args.manifest)
    train_ds, _, _ = corpus.split_dataset(ds, synthetic.split_config()) \
        if args.synthetic_split else (ds, None, None)
    gateway = _build_gateway(
        args, mock_handler=synthetic.mock_interpolation_handler)
    model = harness.train(cfg, train_ds, gateway=gateway, paths=_synthetic_paths)
    harness.save_checkpoint(model, cfg, cfg.train_episodes, args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args):
    model, cfg, _ = harness.load_checkpoint(args.checkpoint)
    ds = corpus.load_dataset(args.manifest)
    if args.synthetic_split:
        _, _, ds = corpus.split_dataset(ds, synthetic.split_config())
    rng = np.random.default_rng(args.seed)
    score = harness.evaluate(model, ds, args.mode, args.episodes, args.split,
                             rng, harness.PCKConfig(rho=args.rho))
    print(f"PCK@{args.rho} [{args.mode}/{args.split}] = {score:.2f}")
    return 0


def cmd_interpolate_texts(args):
    path = auxgen.InterpolationPath(
        endpoint_ids=(0, 1), z=args.z, names=(args.start, args.end),
        category=args.category)
    gateway = _build_gateway(
        args, mock_handler=synthetic.mock_interpolation_handler)
    pool = auxgen.collect_pool(path, args.repetitions, gateway,
                               cot=not args.no_cot, model=args.llm_model)
    for text, rep, rank in pool.candidates:
        print(f"rep={rep} rank={rank} {text}")
    return 0


def cmd_synth_prompts(args):
    ds = corpus.load_dataset(args.manifest)
    bank = diverseprompt.load_template_bank(args.templates)
    rng = np.random.default_rng(args.seed)
    with open(args.out, "w") as f:
        for idx, inst in enumerate(ds.instances):
            visible = sorted(inst.visible_ids())
            if not visible:
                continue
            template = bank.templates[int(rng.integers(len(bank)))]
            count = int(rng.integers(1, len(visible) + 1))
            picked = rng.choice(visible, size=count, replace=False)
            names = [ds.schema.names[i] for i in sorted(picked)]
            text = diverseprompt.synthesize(template, names, inst.species)
            f.write(json.dumps({
                "instance_id": idx, "text": text,
                "gt_object": inst.species if template.has_object else None,
                "gt_keypoints": names}) + "\n")
    print(f"wrote prompts to {args.out}")
    return 0


def cmd_parse(args):
    ds = corpus.load_dataset(args.manifest) if args.manifest else None
    schema = ds.schema if ds else None
    species = ds.species if ds else None
    if args.mode == "fallback":
        bank = diverseprompt.load_template_bank(args.templates)
        parsed = diverseprompt.fallback_parse(args.text, bank, schema=schema,
                                              species=species)
    else:
        gateway = _build_gateway(args)
        from .gateway import ChatRequest
        req = ChatRequest(provider="openai", model=args.llm_model,
                          messages=tuple(diverseprompt.build_parse_prompt(args.text)),
                          temperature=0.0)
        parsed = diverseprompt.parse_reply(gateway.chat(req), schema=schema)
    print(json.dumps({"object": parsed.object,
                      "keypoints": list(parsed.keypoints),
                      "failed": parsed.failed}))
    return 0 if not parsed.failed else 1


def _read_parses(path):
    out = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            out.append(diverseprompt.ParsedPrompt(
                object=rec.get("object") or rec.get("gt_object"),
                keypoints=tuple(rec.get("keypoints") or rec.get("gt_keypoints")),
                failed=rec.get("failed", False)))
    return out


def cmd_score_parsing(args):
    preds = _read_parses(args.pred)
    gts = _read_parses(args.gt)
    acc_kp, acc_obj = diverseprompt.parsing_accuracy(preds, gts,
                                                     args.iou_threshold)
    print(f"acc_kp={acc_kp:.4f} acc_obj={acc_obj:.4f}")
    return 0


def cmd_plot_heatmaps(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import detector

    model, cfg, _ = harness.load_checkpoint(args.checkpoint)
    ds = corpus.load_dataset(args.manifest)
    rng = np.random.default_rng(args.seed)
    ep = corpus.sample_episode(ds, 0 if args.mode == "zero_shot" else 1,
                               cfg.n_max, rng)
    out = model.forward_episode(ds, ep,
                                use_visual=args.mode != "zero_shot",
                                use_textual=args.mode != "k_shot")
    for n, h in zip(ep.keypoint_ids, out["fused"].maps):
        name = ds.schema.names[n]
        detector.export_heatmap(h, f"{args.out}/{name}.npy")
        fig, ax = plt.subplots()
        ax.imshow(h.grid.detach().numpy(), cmap="viridis")
        ax.set_title(name)
        fig.savefig(f"{args.out}/{name}.png")
        plt.close(fig)
    print(f"wrote {len(ep.keypoint_ids)} heatmaps to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="promptpose")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-benchmark", help="render the synthetic benchmark")
    p.add_argument("out")
    p.add_argument("--per-species", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_benchmark)

    p = sub.add_parser("train")
    p.add_argument("manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="checkpoint.pt")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--synthetic-split", action="store_true")
    _add_llm_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=harness.EVAL_MODES, default="zero_shot")
    p.add_argument("--split", choices=["base", "novel", "all"], default="novel")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic-split", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpolate-texts")
    p.add_argument("start")
    p.add_argument("end")
    p.add_argument("--category", default="an animal")
    p.add_argument("--z", type=float, default=0.5)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--no-cot", action="store_true")
    _add_llm_flags(p)
    p.set_defaults(func=cmd_interpolate_texts)

    p = sub.add_parser("synth-prompts")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--templates", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_prompts)

    p = sub.add_parser("parse")
    p.add_argument("text")
    p.add_argument("--mode", choices=["llm", "fallback"], default="fallback")
    p.add_argument("--manifest", default=None)
    p.add_argument("--templates", default=None)
    _add_llm_flags(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("score-parsing")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.9)
    p.set_defaults(func=cmd_score_parsing)

    p = sub.add_parser("plot-heatmaps")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--mode", choices=harness.EVAL_MODES, default="zero_shot")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plot_heatmaps)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except PromptPoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
