"""Command-line entry point wiring the full pipeline.

Subcommands: gen-data, precompute, fit-codebook, train-stage1,
train-stage2, caption, sample-frames, eval, bench. Exit codes: 0 ok,
1 runtime failure, 2 configuration error, 3 missing artifact; failures
print one machine-parseable line ``error category=<cat> message=...``
to stderr. CHANGECAP_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import plots
from .config import (DataConfig, PipelineConfig, TrainConfig, build_config,
                     read_config_file)
from .errors import ConfigError, MissingArtifactError


def _out_root() -> Path:
    return Path(os.environ.get("CHANGECAP_OUT", "."))


def _load_raw_config(path: str | None) -> dict[str, str]:
    return read_config_file(path) if path else {}


def _require_empty(path: Path, force: bool, what: str) -> None:
    if force:
        return
    if path.exists() and any(path.iterdir()):
        raise ConfigError(
            f"{what} output {path} is not empty; pass --force to overwrite")


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_gen_data(args) -> int:
    from .synthdata import build_dataset

    raw = _load_raw_config(args.config)
    cfg = build_config(DataConfig, raw, {
        "num_pairs": args.num_pairs, "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifests = build_dataset(cfg, out, force=args.force)
    counts = {s: len(m.records) for s, m in manifests.items()}
    print(json.dumps({"out": str(out), "records": counts}))
    return 0


def cmd_precompute(args) -> int:
    from .data import precompute_procedures

    raw = _load_raw_config(args.config)
    pipe = build_config(PipelineConfig, raw, {
        "l": args.l, "k": args.k, "interpolator": args.interpolator,
        "strategy": args.strategy})
    precompute_procedures(args.data, pipe, force=args.force)
    print(json.dumps({"data": str(args.data), "l": pipe.l, "k": pipe.k,
                      "interpolator": pipe.interpolator,
                      "strategy": pipe.strategy}))
    return 0


def cmd_fit_codebook(args) -> int:
    from .data import fit_artifacts

    raw = _load_raw_config(args.config)
    pipe = build_config(PipelineConfig, raw, {
        "K_cb": args.K, "patch_size": args.patch_size})
    d = args.d if args.d else build_config(TrainConfig, raw).d
    book = fit_artifacts(args.data, pipe, d=d, force=args.force)
    print(json.dumps({
        "K_cb": book.K_cb, "patch_dim": book.patch_dim,
        "iterations": len(book.inertia_log),
        "quant_error_bound": book.quant_error_bound}))
    return 0


def _train_config(args, stage: int) -> TrainConfig:
    raw = _load_raw_config(args.config)
    overrides = {"stage": stage, "seed": args.seed}
    for key in ("steps", "epochs", "batch_size", "k", "d"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_align", False):
        overrides["use_align"] = False
    if getattr(args, "no_csy", False):
        overrides["use_csy"] = False
    return build_config(TrainConfig, raw, overrides)


def cmd_train_stage1(args) -> int:
    from .trainer import train_stage1

    cfg = _train_config(args, stage=1)
    out = Path(args.out)
    _require_empty(out, args.force or args.resume, "train-stage1")
    ckpt = train_stage1(cfg, args.data, out,
                        resume_from=out if args.resume else None)
    plots.save_loss_curves(ckpt / "log.jsonl", ckpt / "loss.png")
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def cmd_train_stage2(args) -> int:
    from .trainer import train_stage2

    cfg = _train_config(args, stage=2)
    if args.stage1 is None and not args.from_scratch:
        raise MissingArtifactError(
            "train-stage2 needs --stage1 CKPT or an explicit --from-scratch")
    if args.stage1 is not None and not Path(args.stage1).exists():
        raise MissingArtifactError(f"stage-1 checkpoint not found: {args.stage1}")
    out = Path(args.out)
    _require_empty(out, args.force or args.resume, "train-stage2")
    ckpt = train_stage2(cfg, args.data, out, stage1_ckpt=args.stage1,
                        resume_from=out if args.resume else None)
    plots.save_loss_curves(ckpt / "log.jsonl", ckpt / "loss.png")
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def _find_artifact(name: str, *dirs) -> Path:
    for d in dirs:
        if d and (Path(d) / name).exists():
            return Path(d) / name
    raise MissingArtifactError(
        f"{name} not found in any of: " + ", ".join(str(d) for d in dirs if d))


def _embed_pair(args):
    import torch

    from .synthdata import load_png
    from .vq import load_embedder

    embedder = load_embedder(
        _find_artifact("embedder.blob", args.ckpt, args.data))
    before = load_png(args.before)
    after = load_png(args.after)
    emb = embedder.embed_frames([before, after])
    return (torch.from_numpy(emb[0]).unsqueeze(0),
            torch.from_numpy(emb[1]).unsqueeze(0), before, after, embedder)


def cmd_caption(args) -> int:
    from .synthdata import Vocabulary
    from .trainer import load_caption_model

    model, cfg = load_caption_model(args.ckpt)
    vocab = Vocabulary.load(_find_artifact("vocab.txt", args.ckpt, args.data))
    before, after, *_ = _embed_pair(args)
    seqs, logps = model.caption_pair(before, after, mode=args.mode,
                                     beam=args.beam)
    words = vocab.decode(seqs[0])
    print(json.dumps({
        "caption": " ".join(words),
        "token_ids": [int(t) for t in seqs[0]],
        "token_logprobs": [round(v, 6) for v in logps[0]],
    }))
    return 0


def cmd_sample_frames(args) -> int:
    from .interp import BlendInterpolator, generate_procedure
    from .sampler import confidence_scores, sample_keyframes, similarity_profile
    from .synthdata import load_png

    before = load_png(args.before)
    after = load_png(args.after)
    pseudo = generate_procedure(BlendInterpolator(gate=args.gate), before,
                                after, args.l)
    profile = similarity_profile(before, after, pseudo, args.strategy,
                                 caption=args.caption)
    w = confidence_scores(profile)
    chosen = sample_keyframes(before, after, pseudo, w, args.k)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sheet = out / "contact_sheet.png"
    frames = [before] + list(pseudo.frames) + [after]
    labels = ["before"] + [f"t={t:.3f}" for t in pseudo.timestamps] + ["after"]
    highlight = {i + 1 for i in chosen.sampled_indices}
    plots.save_contact_sheet(frames, sheet, labels, highlight)
    print(json.dumps({
        "sampled_indices": chosen.sampled_indices,
        "timestamps": chosen.timestamps,
        "confidence": [round(float(x), 6) for x in w.w],
        "contact_sheet": str(sheet),
    }))
    return 0


def cmd_eval(args) -> int:
    from .data import build_stage2_batch, load_artifacts, load_stage2_dataset
    from .evalkit import (MetricReport, bleu4, cider, exact_match,
                          slot_accuracy)
    from .synthdata import Grammar, read_manifest
    from .trainer import load_caption_model

    model, cfg = load_caption_model(args.ckpt)
    _, embedder = load_artifacts(args.data)
    ds = load_stage2_dataset(args.data, args.split, cfg, embedder)
    manifest = read_manifest(args.data, args.split)
    vocab = manifest.vocab

    candidates = []
    for s in range(0, len(ds), args.batch_size):
        idx = np.arange(s, min(s + args.batch_size, len(ds)))
        before, after, _ = build_stage2_batch(ds, idx)
        memory = model.encode_pair(model.build_query_input(before, after))
        seqs, _ = model.generate(memory, mode="greedy")
        candidates += [" ".join(vocab.decode(q)) for q in seqs]

    refs = [r.captions for r in ds.records]
    report = MetricReport(
        bleu4=bleu4(candidates, refs),
        cider=cider(candidates, refs),
        exact_match=exact_match(candidates, [r.captions[0] for r in ds.records]),
        slot_accuracy=slot_accuracy(candidates, ds.slots, Grammar()),
        corpus_size=len(ds),
        config_hash=manifest.config_hash,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True),
        encoding="utf-8")
    if args.per_sample:
        with open(out / "per_sample.jsonl", "w", encoding="utf-8") as fh:
            for rec, cand in zip(ds.records, candidates):
                fh.write(json.dumps({
                    "id": rec.id, "candidate": cand,
                    "reference": rec.captions[0]}, sort_keys=True) + "\n")
    plots.save_metric_figure(report, out / "slot_accuracy.png")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    import torch

    from .evalkit import attention_op_count, measure_tps, time_encoder_forward
    from .interp import BlendInterpolator
    from .trainer import load_caption_model
    from .vq import PatchEmbedder

    ks = [int(x) for x in args.k.split(",") if x.strip()]
    if not ks:
        raise ConfigError("bench needs at least one k value")

    if args.ckpt:
        model, cfg = load_caption_model(args.ckpt)
    else:
        cfg = TrainConfig(vocab_size=32, max_frames=max(ks) + 2)
        torch.manual_seed(0)
        from .captioner import CaptionModel

        model = CaptionModel(cfg)
        model.eval()

    patch = args.canvas // int(np.sqrt(cfg.n_I))
    embedder = PatchEmbedder(patch, patch * patch * 3, cfg.d, seed=0)
    rng = np.random.default_rng(0)
    frames = [(rng.random((args.canvas, args.canvas, 3)).astype(np.float32),
               rng.random((args.canvas, args.canvas, 3)).astype(np.float32))
              for _ in range(args.pairs)]
    emb_pairs = [(torch.from_numpy(embedder.embed(a).vectors).unsqueeze(0),
                  torch.from_numpy(embedder.embed(b).vectors).unsqueeze(0))
                 for a, b in frames]

    rows = []
    for k in ks:
        profile = attention_op_count(k + 2, cfg.n_I, cfg.d, cfg.l_e, cfg.l_d,
                                     cfg.max_text)
        profile.wall_time_s = time_encoder_forward(model, K=k + 2)
        saved_k = model.cfg.k
        model.cfg.k = k
        tps = measure_tps(model, emb_pairs, mode="implicit",
                          max_len=args.max_len)
        model.cfg.k = saved_k
        profile.tps = tps["tps"]
        rows.append(profile.row())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bench.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    plots.save_bench_figures(rows, out)

    if args.explicit:
        ctx = {"interpolator": BlendInterpolator(), "embedder": embedder,
               "l": args.l, "k": cfg.k}
        imp = measure_tps(model, emb_pairs, mode="implicit",
                          max_len=args.max_len)
        exp = measure_tps(model, frames, mode="explicit", explicit_ctx=ctx,
                          max_len=args.max_len)
        (out / "paths.json").write_text(json.dumps(
            {"implicit_tps": imp["tps"], "explicit_tps": exp["tps"]},
            sort_keys=True), encoding="utf-8")
    print(json.dumps({"rows": len(rows), "csv": str(csv_path)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="changecap",
        description="Two-stage change captioning on a synthetic grid world")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", default=str(_out_root() / "data"))
    p.add_argument("--num-pairs", dest="num_pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("precompute", help="synthesize and sample procedures")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--l", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--interpolator", choices=["blend", "oracle"])
    p.add_argument("--strategy", choices=["visual_only", "visual_text"])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("fit-codebook", help="fit codebook and patch embedder")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--K", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_fit_codebook)

    for stage in (1, 2):
        p = sub.add_parser(f"train-stage{stage}",
                           help=f"run stage-{stage} training")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--force", action="store_true")
        p.add_argument("--resume", action="store_true")
        if stage == 1:
            p.add_argument("--steps", type=int)
            p.add_argument("--no-align", dest="no_align", action="store_true")
            p.add_argument("--no-csy", dest="no_csy", action="store_true")
            p.set_defaults(func=cmd_train_stage1)
        else:
            p.add_argument("--epochs", type=int)
            p.add_argument("--stage1")
            p.add_argument("--from-scratch", dest="from_scratch",
                           action="store_true")
            p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("caption", help="caption one image pair")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset dir fallback for vocab/embedder")
    p.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("sample-frames",
                       help="score and sample keyframes for one pair")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--l", type=int, default=7)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--strategy", choices=["visual_only", "visual_text"],
                   default="visual_only")
    p.add_argument("--caption", help="required for visual_text")
    p.add_argument("--gate", action="store_true")
    p.set_defaults(func=cmd_sample_frames)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--per-sample", dest="per_sample", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="cost profile sweep over k")
    p.add_argument("--out", required=True)
    p.add_argument("--k", default="1,2,4,7")
    p.add_argument("--ckpt")
    p.add_argument("--canvas", type=int, default=32)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--max-len", dest="max_len", type=int, default=10)
    p.add_argument("--l", type=int, default=7)
    p.add_argument("--explicit", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error category=config message={exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error category=missing-artifact message={exc}", file=sys.stderr)
        return 3
    except Exception as exc:   # pragma: no cover - defensive
        print(f"error category=runtime message={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
