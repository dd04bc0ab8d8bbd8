"""``hgtree`` command line.

Every subcommand writes a ``*.manifest.json`` next to its main output holding
the command line, the resolved configuration, seeds and SHA-256 hashes of all
inputs and outputs.  Errors exit with the code of their family (``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import errors
from .config import RunConfig, load_config
from .dataset import file_sha256, read_jsonl, write_jsonl
from .errors import EmptyGenerationError, HGTreeError, UsageError
from .tree import GrowthSequence, TreeSkeleton

log = logging.getLogger("hgtree")

EXIT_CODES = {
    "ok": 0,
    "HGTreeError": errors.HGTreeError.exit_code,
    "InvalidParamsError": errors.InvalidParamsError.exit_code,
    "InvalidScheduleError": errors.InvalidScheduleError.exit_code,
    "NotATreeError": errors.NotATreeError.exit_code,
    "DegenerateGeometryError": errors.DegenerateGeometryError.exit_code,
    "CapacityError": errors.CapacityError.exit_code,
    "EmptyGenerationError": errors.EmptyGenerationError.exit_code,
    "MalformedGrowthError": errors.MalformedGrowthError.exit_code,
    "ShapeError": errors.ShapeError.exit_code,
    "GradientError": errors.GradientError.exit_code,
    "NonFiniteError": errors.NonFiniteError.exit_code,
    "EmptyLossError": errors.EmptyLossError.exit_code,
    "InternalStateError": errors.InternalStateError.exit_code,
    "UsageError": errors.UsageError.exit_code,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---- helpers -------------------------------------------------------------------------


def _seeds(seed: int, count: int) -> list[int]:
    """``count`` well-separated seeds derived from ``seed``."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def _need(path, field: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{field}: file not found: {p}")
    return p


def _manifest(out: Path, args, cfg: RunConfig | None, inputs=(), outputs=(), extra=None) -> Path:
    out = Path(out)
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    data = {
        "version": __version__,
        "command": args.command,
        "argv": [str(a) for a in getattr(args, "_argv", [])],
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": {str(p): file_sha256(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": {str(p): file_sha256(p) for p in outputs if Path(p).is_file()},
    }
    if extra:
        data.update(extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")
    tmp.replace(path)
    return path


def _config(args, flag_overrides: dict[str, object]) -> RunConfig:
    sets = [f"{k}={v}" for k, v in flag_overrides.items() if v is not None]
    return load_config(args.config, sets + list(args.set or []))


def _load_checkpoint(path, quantizer_path=None):
    from .tokenizer import Quantizer
    from .training import load_model

    model, encoder, meta = load_model(_need(path, "checkpoint"))
    if quantizer_path is not None:
        q = Quantizer.load(_need(quantizer_path, "quantizer"))
    elif meta.get("quantizer"):
        q = Quantizer.from_text(meta["quantizer"])
    else:
        raise UsageError("checkpoint carries no quantizer; pass --quantizer")
    return model, encoder, q, meta


def _sampler(cfg: RunConfig, seed_offset: int = 0):
    from .generation import SamplerConfig

    s = cfg.sampler
    return SamplerConfig(s.temperature, s.top_k, s.max_new_tokens, s.seed + seed_offset, s.greedy, s.constrained)


def _final(item) -> TreeSkeleton:
    return item.final if isinstance(item, GrowthSequence) else item


# ---- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .procedural import generate_corpus
    from .tokenizer import normalize_growth
    from .tree import normalize

    seeds = _seeds(args.seed, args.count)
    items = generate_corpus(args.profile, seeds, growth=args.growth)
    items = [normalize_growth(x)[0] for x in items] if args.growth else [normalize(x)[0] for x in items]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, items)
    _manifest(out, args, None, outputs=[out], extra={"seeds": seeds, "profile": args.profile, "growth": args.growth})
    print(f"wrote {len(items)} {'growth sequences' if args.growth else 'trees'} to {out}")
    return 0


def cmd_fit_quantizer(args) -> int:
    from .tokenizer import fit_quantizer

    corpus = read_jsonl(_need(args.corpus, "corpus"))
    trees = [s for x in corpus for s in (x.stages if isinstance(x, GrowthSequence) else (x,))]
    q = fit_quantizer(trees, Path(args.corpus).name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    q.save(out)
    _manifest(out, args, None, inputs=[args.corpus], outputs=[out])
    print(f"quantizer ({q.provenance}) -> {out}")
    return 0


def cmd_train(args) -> int:
    from .optim import OptimizerState, load_checkpoint, save_checkpoint
    from .plotting import plot_loss_curve
    from .tokenizer import GROWTH_TOTAL_LENGTH, Quantizer, sequence_length
    from .training import Corpus, save_training_checkpoint, train

    flags = {"model.variant": args.variant, "model.dim": args.dim, "model.total_layers": args.layers,
             "train.epochs": args.epochs, "train.batch_size": args.batch_size, "train.peak_lr": args.lr,
             "train.order": args.order, "train.seed": args.seed, "train.warmup_epochs": args.warmup_epochs,
             "paths.corpus": args.corpus, "paths.quantizer": args.quantizer, "paths.out_dir": args.out_dir}
    if args.no_augment:
        flags["train.augment"] = "false"
    if args.conditional:
        flags["model.prefix"] = 56
    cfg = _config(args, flags)
    corpus_items = read_jsonl(_need(cfg.paths.corpus, "paths.corpus"))
    growth = bool(corpus_items) and isinstance(corpus_items[0], GrowthSequence)
    if growth and not cfg.train.growth:
        flags["train.growth"] = "true"
        if cfg.model.context == sequence_length(cfg.train.n_max):
            flags["model.context"] = GROWTH_TOTAL_LENGTH
        cfg = _config(args, flags)
    if not growth and cfg.model.context != sequence_length(cfg.train.n_max):
        raise UsageError(f"model.context ({cfg.model.context}) must equal 8*(train.n_max+2) = {sequence_length(cfg.train.n_max)}")
    q = Quantizer.load(_need(cfg.paths.quantizer, "paths.quantizer"))
    out_dir = Path(cfg.paths.out_dir)
    if (out_dir / "metrics.csv").exists():
        (out_dir / "metrics.csv").unlink()
    corpus = Corpus(corpus_items, q, cfg.train, cfg.model.context)
    res = train(corpus, cfg.train, cfg.model, out_dir=out_dir, max_steps=args.max_steps)
    final = out_dir / "model.bin"
    if res.checkpoints:
        shutil.copyfile(res.checkpoints[-1], final)
    else:
        save_training_checkpoint(final, res.model, OptimizerState(), cfg.train, res.encoder)
    # re-save with the quantizer embedded so sampling needs only the checkpoint
    arrays, meta = load_checkpoint(final)
    meta["quantizer"] = q.to_text()
    save_checkpoint(final, arrays, meta)
    outputs = [final, out_dir / "metrics.csv"]
    if (out_dir / "metrics.csv").exists() and res.log:
        outputs.append(plot_loss_curve(out_dir / "metrics.csv", out_dir / "loss.png"))
    _manifest(out_dir, args, cfg, inputs=[args.corpus, cfg.paths.quantizer], outputs=outputs,
              extra={"steps": len(res.log), "final_loss": res.log[-1]["loss"] if res.log else None})
    print(f"trained {len(res.log)} steps; final loss {res.log[-1]['loss'] if res.log else float('nan'):.4f}; -> {final}")
    return 0


def _write_samples(args, cfg, outs, q, extra_inputs=()) -> int:
    from .metrics import connect_score, default_connect_eps
    from .mesh import export_mesh
    from .plotting import plot_trees

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    eps = cfg.eval.connect_eps if cfg.eval.connect_eps is not None else default_connect_eps(q)
    trees, rows = [], ["index,n_branches,truncated,connect,decoded"]
    for i, o in enumerate(outs):
        try:
            t = o.tree(q)
        except EmptyGenerationError:
            rows.append(f"{i},0,{int(o.truncated)},0.0,0")
            continue
        trees.append(t)
        rows.append(f"{i},{t.n},{int(o.truncated)},{connect_score(t, eps)[0]:.6f},1")
    write_jsonl(out, trees)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text("\n".join(rows) + "\n")
    outputs = [out, csv_path]
    if trees:
        outputs.append(plot_trees(trees, out.with_suffix(".png")))
    if getattr(args, "mesh_dir", None):
        mdir = Path(args.mesh_dir)
        mdir.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(trees):
            export_mesh(t, mdir / f"sample_{i:04d}.obj")
            outputs.append(mdir / f"sample_{i:04d}.obj")
    _manifest(out, args, cfg, inputs=[args.checkpoint, *extra_inputs], outputs=outputs,
              extra={"sample_seeds": [cfg.sampler.seed + i for i in range(len(outs))]})
    print(f"{len(trees)}/{len(outs)} samples decoded -> {out}")
    return 0


def _sampler_flags(args) -> dict:
    return {"sampler.temperature": args.temperature, "sampler.top_k": args.top_k, "sampler.seed": args.seed,
            "sampler.max_new_tokens": args.max_new_tokens, "sampler.greedy": "true" if args.greedy else None}


def cmd_sample(args) -> int:
    from .generation import sample_unconditional

    cfg = _config(args, _sampler_flags(args))
    model, _, q, _ = _load_checkpoint(args.checkpoint, args.quantizer)
    outs = [sample_unconditional(model, _sampler(cfg, i)) for i in range(args.n)]
    return _write_samples(args, cfg, outs, q)


def cmd_complete(args) -> int:
    from .generation import complete_sequences
    from .ordering import order_branches

    cfg = _config(args, _sampler_flags(args))
    model, _, q, meta = _load_checkpoint(args.checkpoint, args.quantizer)
    order = args.order or meta.get("train", {}).get("order", "dfs")
    tree = _final(read_jsonl(_need(args.prompt, "prompt"))[args.index])
    if args.keep is not None:
        perm = order_branches(tree, order)
        tree = tree.subset(list(perm.order)[: args.keep])
    outs = complete_sequences(model, tree, q, _sampler(cfg), args.n, order)
    return _write_samples(args, cfg, outs, q, [args.prompt])


def _read_points(path) -> np.ndarray:
    path = _need(path, "points")
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, dtype=np.float64).reshape(-1, 3)


def cmd_pc2tree(args) -> int:
    from .generation import encode_point_cloud, sample_conditional

    cfg = _config(args, _sampler_flags(args))
    model, encoder, q, _ = _load_checkpoint(args.checkpoint, args.quantizer)
    if encoder is None:
        raise UsageError("checkpoint has no point-cloud encoder (train with --conditional)")
    prefix = encode_point_cloud(encoder, _read_points(args.points))
    outs = [sample_conditional(model, prefix, _sampler(cfg, i)) for i in range(args.n)]
    return _write_samples(args, cfg, outs, q, [args.points])


def cmd_grow(args) -> int:
    from .errors import MalformedGrowthError
    from .generation import sample_growth

    cfg = _config(args, _sampler_flags(args))
    model, _, q, _ = _load_checkpoint(args.checkpoint, args.quantizer)
    seqs, rows = [], ["index,stages_recovered,counts"]
    for i in range(args.n):
        try:
            gs, _ = sample_growth(model, q, _sampler(cfg, i))
        except MalformedGrowthError as e:
            rows.append(f"{i},{e.recovered},")
            continue
        seqs.append(gs)
        rows.append(f"{i},10,{' '.join(str(c) for c in gs.counts())}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, seqs)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text("\n".join(rows) + "\n")
    _manifest(out, args, cfg, inputs=[args.checkpoint], outputs=[out, csv_path])
    print(f"{len(seqs)}/{args.n} growth sequences well-formed -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .plotting import plot_eval
    from .tokenizer import Quantizer

    cfg = _config(args, {"eval.n_points": args.points, "eval.seed": args.seed})
    gen = [_final(x) for x in read_jsonl(_need(args.gen, "gen"))]
    ref = [_final(x) for x in read_jsonl(_need(args.ref, "ref"))]
    train = [_final(x) for x in read_jsonl(_need(args.train, "train"))] if args.train else []
    q = Quantizer.load(_need(args.quantizer, "quantizer")) if args.quantizer else None
    n_missing = max(0, args.expected - len(gen)) if args.expected else 0
    e = cfg.eval
    report = evaluate(gen + [None] * n_missing, ref, train, e.connect_eps, q, e.n_points, e.jsd_grid,
                      e.novelty_delta, e.seed)
    if args.checkpoint and args.heldout:
        from .training import Corpus, TrainConfig, perplexity

        model, encoder, cq, meta = _load_checkpoint(args.checkpoint, args.quantizer)
        tcfg = TrainConfig.from_dict(meta["train"])
        held = read_jsonl(_need(args.heldout, "heldout"))
        report.mean_nll, report.exp_mean_nll = perplexity(model, Corpus(held, cq, tcfg, model.cfg.context),
                                                          encoder=encoder)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.csv").write_text(report.to_csv())
    (out_dir / "eval.txt").write_text(report.pretty() + "\n")
    png = plot_eval(report, out_dir / "eval.png")
    _manifest(out_dir, args, cfg, inputs=[args.gen, args.ref, args.train, args.quantizer, args.checkpoint, args.heldout],
              outputs=[out_dir / "eval.csv", out_dir / "eval.txt", png])
    print(report.pretty())
    return 0


def cmd_export_mesh(args) -> int:
    from .mesh import export_mesh

    items = read_jsonl(_need(args.tree, "tree"))
    if not 0 <= args.index < len(items):
        raise UsageError(f"index: {args.index} out of range (file has {len(items)} records)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh = export_mesh(_final(items[args.index]), out, args.sides)
    _manifest(out, args, None, inputs=[args.tree], outputs=[out])
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} triangles, {mesh.skipped} skipped -> {out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench, to_csv
    from .plotting import plot_bench

    variants = [v.strip().upper() for v in args.variants.split(",") if v.strip()]
    results = run_bench(variants, context=args.context, layers=args.layers, dim=args.dim, heads=args.heads,
                        batch=args.batch, steps=args.steps, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bench.csv").write_text(to_csv(results))
    png = plot_bench(results, out_dir / "bench.png")
    _manifest(out_dir, args, None, outputs=[out_dir / "bench.csv", png])
    base = results[0]
    for r in results:
        print(f"{r.variant:6s} {r.seconds_per_step:8.3f} s/step ({r.seconds_per_step / base.seconds_per_step:.3f}x)  "
              f"{r.peak_rss_mb:8.1f} MB ({r.peak_rss_mb / base.peak_rss_mb:.3f}x)  "
              f"attention {r.attention_cost} ({r.attention_cost / base.attention_cost:.4f}x)")
    return 0


# ---- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hgtree", description="Tree-skeleton generation with an hourglass transformer.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, sampler=False):
        p.add_argument("--config", help="INI config file ([paths] [model] [train] [sampler] [eval])")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        if sampler:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--quantizer", help="defaults to the quantizer stored in the checkpoint")
            p.add_argument("--n", type=int, default=1, help="number of samples (default 1)")
            p.add_argument("--out", required=True, help="output JSONL; a CSV summary and PNG are written next to it")
            p.add_argument("--temperature", type=float)
            p.add_argument("--top-k", type=int)
            p.add_argument("--max-new-tokens", type=int)
            p.add_argument("--greedy", action="store_true")
            p.add_argument("--seed", type=int, help="sample i uses seed+i (default 0)")
            p.add_argument("--mesh-dir", help="also export each sample as an OBJ tube mesh")

    p = sub.add_parser("gen-data", help="procedural corpus to JSONL")
    p.add_argument("--profile", default="elm", choices=["elm", "spruce", "sapling"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--growth", action="store_true", help="write 10-stage growth sequences")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-quantizer", help="fit bin edges to a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_quantizer)

    p = sub.add_parser("train", help="train a model; writes metrics.csv, loss.png, checkpoints")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--quantizer")
    p.add_argument("--out-dir")
    p.add_argument("--variant", choices=["PT", "HG1", "HG2", "HG2R", "HG2RL", "pt", "hg1", "hg2", "hg2r", "hg2rl"])
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--order", choices=["zyx", "hilbert", "dfs", "bfs"])
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--conditional", action="store_true", help="train with a 56-slot point-cloud prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="unconditional samples")
    common(p, sampler=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("complete", help="complete a partial tree")
    common(p, sampler=True)
    p.add_argument("--prompt", required=True, help="JSONL file holding the partial tree")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--keep", type=int, help="keep only the first K branches of the prompt tree (in --order)")
    p.add_argument("--order", choices=["zyx", "hilbert", "dfs", "bfs"])
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("pc2tree", help="trees conditioned on a point cloud")
    common(p, sampler=True)
    p.add_argument("--points", required=True, help=".npy or whitespace text file of xyz rows")
    p.set_defaults(func=cmd_pc2tree)

    p = sub.add_parser("grow", help="sample 10-stage growth sequences")
    common(p, sampler=True)
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("eval", help="metric suite; writes eval.csv, eval.txt, eval.png")
    common(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--train")
    p.add_argument("--quantizer", help="sets the Connect tolerance from the bin width")
    p.add_argument("--checkpoint")
    p.add_argument("--heldout", help="JSONL corpus for mean NLL (needs --checkpoint)")
    p.add_argument("--expected", type=int, help="number of samples attempted; missing ones score Connect 0")
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mesh", help="OBJ tube mesh of one tree")
    p.add_argument("--tree", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--sides", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("bench", help="time and peak memory per training step")
    p.add_argument("--variants", default="pt,hg1,hg2")
    p.add_argument("--context", type=int, default=1616)
    p.add_argument("--layers", type=int, default=24)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="bench")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args._argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except HGTreeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
