"""Command-line entry point: ``vidconcepts {synth-data,train,eval,export}``.

Exit status is 0 on success, 1 when a module raises, 2 on a usage error.
Relative ``--out`` paths resolve under ``$VIDCONCEPTS_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from .config import load_config, write_echo
from .errors import ConfigError, InvalidInputError, InvalidSplitError, TrainingDivergenceError
from .videokit import ClipDataset, experiment_root, generate_synth_dataset, load_dataset, save_dataset

log = logging.getLogger("vidconcepts")

DATA_DIR = "data"
MODULE_ERRORS = (ConfigError, InvalidInputError, InvalidSplitError, TrainingDivergenceError,
                 OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _resolve(path):
    path = Path(path)
    return path if path.is_absolute() else experiment_root() / path


def _synth(cfg, seed):
    vk = cfg.videokit
    return generate_synth_dataset(vk.n_samples, vk.n_static_classes, vk.n_dynamic_classes,
                                  tuple(vk.shape), seed, vk.sprite_frac)


def _dataset(args, cfg, out=None):
    """``--data`` if given, else ``<out>/data`` if present, else fresh synthetic clips."""
    if getattr(args, "data", None):
        return load_dataset(_resolve(args.data))
    if out is not None and (out / DATA_DIR / "manifest.tsv").exists():
        return load_dataset(out / DATA_DIR)
    vk = cfg.videokit
    samples = _synth(cfg, cfg.seed if args.seed is None else args.seed)
    return ClipDataset.from_samples(samples, vk.n_static_classes, vk.n_dynamic_classes)


def cmd_synth_data(args):
    out = _resolve(args.out)
    cfg = load_config(args.config, echo_dir=out)
    seed = cfg.seed if args.seed is None else args.seed
    vk = cfg.videokit
    samples = _synth(cfg, seed)
    save_dataset(samples, out / DATA_DIR, vk.n_static_classes, vk.n_dynamic_classes)
    print(f"wrote {len(samples)} clips to {out / DATA_DIR}")
    return 0


def cmd_train(args):
    from .trainer import train

    out = _resolve(args.out)
    cfg = load_config(args.config, echo_dir=out)
    dataset = _dataset(args, cfg, out)
    result = train(dataset, cfg, out, seed=args.seed, deterministic=args.deterministic)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final total loss {last.total:.6f}; "
          f"checkpoint {result.checkpoint}")
    return 0


def _eval_dataset(args, cfg, ckpt):
    if args.data:
        return load_dataset(_resolve(args.data))
    sibling = ckpt.parent / DATA_DIR
    if (sibling / "manifest.tsv").exists():
        return load_dataset(sibling)
    return _dataset(args, cfg)


def cmd_eval(args):
    from .checkpoint import restore

    ckpt = _resolve(args.checkpoint)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, cfg, _ = restore(ckpt)
    if args.config:
        cfg = load_config(args.config)
    write_echo(cfg, out)
    dataset = _eval_dataset(args, cfg, ckpt)
    sources = evalkit.SOURCES if args.source == "all" else (args.source,)
    labels = evalkit.LABEL_KINDS if args.label == "all" else (args.label,)

    if args.task == "attention":
        n = min(args.limit, len(dataset))
        records = evalkit.export_attention_overlays(model, dataset.clips[:n], out / "attention",
                                                    dataset.ids[:n], cfg)
        evalkit.write_records([{"id": r["id"], "static_concept": r["static_concept"],
                                "dynamic_concept": r["dynamic_concept"]} for r in records],
                              out / "attention.jsonl")
        print(f"wrote attention overlays for {n} clips to {out / 'attention'}")
        return 0

    feats = evalkit.extract_all(model, dataset, cfg)
    if args.task == "probe":
        results = evalkit.probe_table(feats, dataset, cfg, sources, labels)
        evalkit.write_records([r.as_dict() for r in results], out / "probe.jsonl")
        for r in results:
            print(f"probe {r.feature_source:6s} {r.label_kind:8s} {r.accuracy:.4f}")
    elif args.task == "retrieval":
        records = []
        for src in sources:
            for kind in labels:
                res = evalkit.split_retrieval(feats[src], dataset.labels(kind), cfg)
                records.append({"feature_source": src, "label_kind": kind, **res.as_dict()})
                print(f"retrieval {src:6s} {kind:8s} " +
                      " ".join(f"{k}={v:.4f}" for k, v in res.as_dict().items()))
        evalkit.write_records(records, out / "retrieval.jsonl")
    elif args.task == "heatmap":
        k_s = model.k_static
        codes = feats["q_v"]
        n_dyn = dataset.n_dynamic_classes
        n_cls = dataset.n_static_classes * n_dyn
        cls_static = np.arange(n_cls) // n_dyn
        cls_dynamic = np.arange(n_cls) % n_dyn
        summary = {}
        arrays = {}
        for name, sl in (("static", codes[:, :k_s]), ("dynamic", codes[:, k_s:])):
            sim = evalkit.code_similarity_heatmap(sl, dataset.action_labels, n_cls)
            arrays[name] = sim
            summary[name] = {"static_gap": evalkit.heatmap_gap(sim, cls_static, cls_dynamic),
                             "dynamic_gap": evalkit.heatmap_gap(sim, cls_dynamic, cls_static)}
        np.savez(out / "heatmap.npz", **arrays, class_static=cls_static,
                 class_dynamic=cls_dynamic)
        (out / "heatmap.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_export(args):
    from .checkpoint import restore

    ckpt = _resolve(args.checkpoint)
    out = _resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, cfg, _ = restore(ckpt)
    dataset = _eval_dataset(args, cfg, ckpt)
    feats = evalkit.extract_all(model, dataset, cfg)
    path = evalkit.dump_codes(feats, dataset.ids, out / "codes.npz")
    print(f"wrote codes for {len(dataset)} clips to {path}")
    return 0


def build_parser():
    parser = _Parser(prog="vidconcepts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        p.add_argument("--out", required=out_required, help="experiment directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("synth-data", help="render the synthetic clip dataset")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="pretrain the concept model")
    common(p)
    p.add_argument("--data", help="dataset directory (manifest.tsv + clips)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic kernels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=["probe", "retrieval", "heatmap", "attention"])
    p.add_argument("--source", default="v", choices=list(evalkit.SOURCES) + ["all"])
    p.add_argument("--label", default="all", choices=list(evalkit.LABEL_KINDS) + ["all"])
    p.add_argument("--data", help="dataset directory; defaults to the checkpoint's experiment")
    p.add_argument("--limit", type=int, default=8, help="clips to render for --task attention")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="dump concept codes keyed by sample id")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MODULE_ERRORS as exc:
        print(f"vidconcepts {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
