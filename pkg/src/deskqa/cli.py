"""Command-line entry point: gen / train / predict / eval / bench /
gradcheck / sweep-j, all reproducible from one --seed and a resolved config
written next to every command's outputs."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig
from .corpus import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoder import load_checkpoint, save_checkpoint
from .inference import (
    block_pass_benchmark,
    evaluate,
    format_report_table,
    write_predictions,
)
from .preprocess import Vocabulary


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file of config keys")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "window":
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("int", "float", "str", "int | None"):
            typ = {"int": int, "float": float, "str": str}.get(f.type, int)
            parser.add_argument(flag, type=typ, default=None)


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Precedence: command-line flag > config file > dataclass default."""
    data: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            data.update(json.load(fh))
    for f in dataclasses.fields(TrainConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            data[f.name] = val
    return TrainConfig.from_dict(data)


def _write_resolved(config: TrainConfig, out_dir: Path, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = config.to_dict()
    if extra:
        payload.update(extra)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": args.train_instances, "dev": args.dev_instances, "test": args.test_instances}
    for split, n in counts.items():
        spec = SyntheticSpec(
            seed=args.seed,
            num_instances=n,
            docs_per_instance=args.docs_per_instance,
            paragraphs_per_doc=args.paragraphs_per_doc,
            paragraph_len_range=(args.paragraph_len_min, args.paragraph_len_max),
            vocab_size=args.vocab_size,
            distractor_rate=args.distractor_rate,
            answer_len_range=(args.answer_len_min, args.answer_len_max),
        )
        save_dataset(generate_synthetic(spec, split), out / f"{split}.jsonl")
    with open(out / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in vars(args).items() if k not in ("func", "config")},
                  fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    print(f"wrote {', '.join(f'{s}.jsonl ({n})' for s, n in counts.items())} to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import model_from_config, train

    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances = load_dataset(args.dataset)
    vocab = Vocabulary.build(instances)
    vocab.save(out / "vocab.txt")
    model = model_from_config(config, len(vocab))
    log = train(model, instances, vocab, config, checkpoint_dir=out)
    save_checkpoint(model, out / "final.ckpt")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")
    _write_resolved(config, out, {"dataset": str(args.dataset)})
    print(f"trained {config.epochs} epochs, {len(log)} steps; checkpoint at {out/'final.ckpt'}")
    return 0


def cmd_predict(args) -> int:
    from .inference import predict
    from .train import preprocess_dataset

    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances = load_dataset(args.dataset)
    vocab = Vocabulary.load(args.vocab)
    model = load_checkpoint(args.checkpoint)
    by_instance = preprocess_dataset(instances, vocab, config)
    preds = [
        predict(inst, model, vocab, config, segments=by_instance[inst.id])[0]
        for inst in instances
    ]
    write_predictions(preds, out / "predictions.jsonl")
    _write_resolved(config, out, {"dataset": str(args.dataset), "checkpoint": str(args.checkpoint)})
    print(f"wrote {len(preds)} predictions to {out/'predictions.jsonl'}")
    return 0


_ABLATIONS = {
    "full": dict(use_retriever=True, use_reranker=True),
    "no-reranker": dict(use_retriever=True, use_reranker=False),
    "no-retriever": dict(use_retriever=False, use_reranker=True),
    "no-both": dict(use_retriever=False, use_reranker=False),
}


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances = load_dataset(args.dataset)
    vocab = Vocabulary.load(args.vocab)
    model = load_checkpoint(args.checkpoint)
    names = list(_ABLATIONS) if args.ablations else ["full"]
    reports = []
    for name in names:
        report, _ = evaluate(instances, model, vocab, config, ablation=name, **_ABLATIONS[name])
        reports.append(report)
    table = format_report_table(reports)
    print(table)
    with open(out / "eval_report.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    with open(out / "eval_report.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(config, out, {"dataset": str(args.dataset), "checkpoint": str(args.checkpoint)})
    return 0


def cmd_bench(args) -> int:
    result = block_pass_benchmark(args.segments, args.top_segments, args.blocks, args.depth)
    lines = [
        "mode      block-passes",
        f"unified   {result.unified}",
        f"pipeline  {result.pipeline}",
        f"ratio     {result.ratio:.2f}",
    ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.txt").write_text(text + "\n", encoding="utf-8")
        (out / "bench.json").write_text(
            json.dumps(
                {"unified": result.unified, "pipeline": result.pipeline, "ratio": result.ratio},
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
    return 0


def cmd_gradcheck(args) -> int:
    import torch

    from .encoder import ModelConfig, QAModel, gradient_check
    from .gradcheck import joint_loss_builder, randomize

    torch.manual_seed(args.seed)
    model = QAModel(
        ModelConfig(
            vocab_size=args.vocab_size,
            hidden=args.hidden,
            blocks=args.blocks,
            heads=args.attention_heads,
            max_len=args.max_len,
            dropout=0.0,
        )
    ).double()
    randomize(model, seed=args.seed)
    model.eval()
    loss_fn = joint_loss_builder(model, seed=args.seed)
    report = gradient_check(loss_fn, model, eps=args.eps, tolerance=args.tolerance)
    worst = max(report["tensors"].items(), key=lambda kv: kv[1]["max_rel_error"], default=None)
    for name, entry in sorted(report["tensors"].items()):
        status = "ok" if entry["passed"] else "FAIL"
        print(f"{status:4s} {name}: {entry['max_rel_error']:.3e}")
    if worst:
        print(f"worst tensor: {worst[0]} ({worst[1]['max_rel_error']:.3e})")
    print("PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 1


def cmd_sweep_j(args) -> int:
    from .train import model_from_config, preprocess_dataset, train

    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_instances = load_dataset(args.dataset)
    dev_instances = load_dataset(args.dev)
    vocab = Vocabulary.build(train_instances)
    vocab.save(out / "vocab.txt")

    rows = []
    for depth in args.depths:
        cfg = TrainConfig.from_dict({**config.to_dict(), "early_exit_depth": depth})
        model = model_from_config(cfg, len(vocab))
        train(model, train_instances, vocab, cfg)
        report, _ = evaluate(dev_instances, model, vocab, cfg)
        by_instance = preprocess_dataset(dev_instances, vocab, cfg)
        avg_segments = sum(len(s) for s in by_instance.values()) / max(len(by_instance), 1)
        n = max(math.ceil(avg_segments), cfg.retrieved_segments)
        bench = block_pass_benchmark(n, cfg.retrieved_segments, cfg.blocks, depth)
        rows.append((depth, report, bench))

    n_cols = sorted({n for _, r, _ in rows for n in r.top_n})
    headers = ["J", "MAP"] + [f"top-{n}" for n in n_cols] + ["F1", "block-passes"]
    table_rows = [headers]
    for depth, report, bench in rows:
        table_rows.append(
            [str(depth), f"{report.map:.4f}"]
            + [f"{report.top_n.get(n, 0.0):.4f}" for n in n_cols]
            + [f"{report.f1:.4f}", str(bench.unified)]
        )
    widths = [max(len(r[i]) for r in table_rows) for i in range(len(headers))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in table_rows)
    print(text)
    (out / "sweep_j.txt").write_text(text + "\n", encoding="utf-8")
    with open(out / "sweep_j.json", "w", encoding="utf-8") as fh:
        json.dump(
            [
                {"J": d, "report": r.to_dict(), "block_passes": b.unified}
                for d, r, b in rows
            ],
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    _write_resolved(config, out, {"dataset": str(args.dataset), "dev": str(args.dev),
                                  "depths": list(args.depths)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskqa",
        description="Unified retrieve-read-rerank QA on synthetic corpora",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--train-instances", type=int, default=2000)
    p.add_argument("--dev-instances", type=int, default=300)
    p.add_argument("--test-instances", type=int, default=0)
    p.add_argument("--docs-per-instance", type=int, default=3)
    p.add_argument("--paragraphs-per-doc", type=int, default=4)
    p.add_argument("--paragraph-len-min", type=int, default=8)
    p.add_argument("--paragraph-len-max", type=int, default=14)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--distractor-rate", type=float, default=0.5)
    p.add_argument("--answer-len-min", type=int, default=1)
    p.add_argument("--answer-len-max", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the model end to end")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predictions for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate EM/F1/MAP/top-N")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablations", action="store_true",
                   help="also report no-reranker / no-retriever / no-both columns")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="analytic unified-vs-pipeline block-pass counts")
    p.add_argument("--segments", "--n", dest="segments", type=int, required=True)
    p.add_argument("--top-segments", "--N", dest="top_segments", type=int, required=True)
    p.add_argument("--blocks", "--I", dest="blocks", type=int, required=True)
    p.add_argument("--depth", "--J", dest="depth", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--attention-heads", type=int, default=2)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-j", help="train/evaluate across early-exit depths")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_j)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
