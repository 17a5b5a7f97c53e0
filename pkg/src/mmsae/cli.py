"""Command-line entry point: ``mmsae train | eval | tools``.

Exit codes: 0 success, 1 configuration or usage error, 2 data error
(bad file, shape or format mismatch, failed precondition), 3 numeric
divergence during training.
"""

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import __version__
from .errors import ConfigError, MmsaeError, NumericError, TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# CLI flag -> TrainConfig field
_TRAIN_FLAGS = {
    "variant": "variant", "k": "k", "expansion": "expansion", "lambda_gs": "lambda_gs",
    "p_mask": "p_mask", "lr": "lr", "steps": "steps", "batch_size": "batch_size",
    "seed": "seed", "log_every": "log_every", "checkpoint_every": "checkpoint_every",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _existing(path, what):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dump_scalars(path, fmt, values):
    path = Path(path)
    if fmt == "toml":
        path.write_text(tomli_w.dumps(values), encoding="utf-8")
    else:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(values))
            w.writerow([repr(v) if isinstance(v, float) else v for v in values.values()])


def _load_ckpt(path):
    from .sae_model import load_checkpoint

    params, k, meta = load_checkpoint(_existing(path, "checkpoint"))
    return params, k, meta


def _check_d(params, d, what):
    from .errors import ShapeError

    if d != params.d:
        raise ShapeError(f"{what} has d={d} but the checkpoint has d={params.d}")


# ---------------------------------------------------------------- train

def _train_config(args):
    from .training import TrainConfig

    values = {}
    if args.config is not None:
        with _existing(args.config, "config file").open("rb") as fh:
            try:
                doc = tomli.load(fh)
            except tomli.TOMLDecodeError as err:
                raise ConfigError(f"{args.config}: {err}") from None
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {unknown}")
        values.update(doc)
    for flag, name in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            values[name] = value
    try:
        return TrainConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def cmd_train(args):
    from .embedding_store import load_paired
    from .sae_model import save_checkpoint
    from .training import checkpoint_meta, train

    manifest = _existing(args.manifest, "manifest")
    cfg = _train_config(args)
    ds = load_paired(manifest)
    cfg = cfg.resolved(ds.modalities)
    print("# resolved config")
    print(tomli_w.dumps({k: v for k, v in cfg.to_dict().items() if v is not None}), end="")
    out = Path(args.out)
    log = args.log if args.log is not None else out.with_suffix(".log")
    Path(log).write_text("", encoding="utf-8")
    try:
        result = train(ds, cfg, log_path=log, checkpoint_path=out)
    except TrainingDiverged as err:
        if err.last_good is not None:
            save_checkpoint(out, err.last_good, cfg.k,
                            checkpoint_meta(cfg, max(err.step - 1, 0), ds.modalities))
        raise
    save_checkpoint(out, result.params, cfg.k, checkpoint_meta(cfg, None, ds.modalities))
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"step {last['step']}: loss {last['total']:.6g} "
              f"fve_a {last['fve_a']:.4f} fve_b {last['fve_b']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# ----------------------------------------------------------------- eval

def _modalities(meta):
    mods = meta.get("modalities")
    return tuple(mods) if mods else None


def cmd_eval(args):
    params, k, meta = _load_ckpt(args.ckpt)
    k = args.k or k
    out = Path(args.out) if args.out else Path(f"{args.what}.{args.format}")
    kind = args.what
    if kind in ("dead", "mms", "align"):
        from .embedding_store import load_paired

        if args.val is None:
            raise ConfigError(f"eval {kind} needs --val")
        val = load_paired(_existing(args.val, "validation manifest"))
        _check_d(params, val.d, "validation set")
    if kind == "dead":
        from .metrics import dead_neuron_census, write_dead_report

        report = dead_neuron_census(params, val, k)
        write_dead_report(out, report, args.format)
        print(" ".join(f"{name}={count}" for name, count in report.counts().items()))
    elif kind == "mms":
        from .embedding_store import load_paired
        from .metrics import mms_report, mms_report_dense, write_mms_report

        if args.scorer is None:
            raise ConfigError("eval mms needs --scorer")
        scorer = load_paired(_existing(args.scorer, "scorer manifest"))
        pair = tuple(part.strip() for part in args.pair.split(","))
        if len(pair) != 2:
            raise ConfigError(f"--pair needs two comma-separated modalities, got {args.pair!r}")
        if args.dense:
            report = mms_report_dense(val, scorer, pair)
        else:
            report = mms_report(params, val, scorer, k, pair)
        write_mms_report(out, report, args.format)
        s = report.scores
        print(f"mms {','.join(report.modality_pair)}: mean {s.mean() if s.size else 0.0:.6g} "
              f"max {s.max() if s.size else 0.0:.6g} nonzero {int((s != 0).sum())}/{s.size}")
    elif kind == "align":
        from .crossmodal_eval import alignment_report

        rep = alignment_report(params, val, k)
        _dump_scalars(out, args.format, {"mean_cosine": rep.mean_cosine,
                                         "mean_support_overlap": rep.mean_support_overlap})
        print(f"mean_cosine {rep.mean_cosine:.6g} mean_support_overlap {rep.mean_support_overlap:.6g}")
    elif kind == "zeroshot":
        from .crossmodal_eval import load_zero_shot_task, zero_shot_classify

        task = load_zero_shot_task(_existing(_need(args.task, "eval zeroshot", "--task"), "task manifest"))
        _check_d(params, task.test_embeddings.d, "task")
        acc = zero_shot_classify(params, task, k, _modalities(meta))
        _dump_scalars(out, args.format, {"accuracy": acc, "n_test": int(task.labels.size),
                                         "n_classes": int(task.n_classes)})
        print(f"zero-shot accuracy {acc:.6g}")
    elif kind == "retrieval":
        from .crossmodal_eval import load_retrieval_task, retrieval_mrr

        queries, corpus, gt = load_retrieval_task(
            _existing(_need(args.task, "eval retrieval", "--task"), "task manifest"))
        _check_d(params, queries.d, "task")
        mrr = retrieval_mrr(params, queries, corpus, gt, k, _modalities(meta))
        _dump_scalars(out, args.format, {"mrr": mrr, "n_queries": int(gt.size)})
        print(f"MRR {mrr:.6g}")
    return EXIT_OK


def _need(value, cmd, flag):
    if value is None:
        raise ConfigError(f"{cmd} needs {flag}")
    return value


# ---------------------------------------------------------------- tools

def _vocab(args):
    from .interpret import load_vocab

    return load_vocab(_existing(args.terms, "terms file"), _existing(args.vocab, "vocabulary MEB"))


def _tool_name_concepts(args):
    from .interpret import name_concepts

    params, _, _ = _load_ckpt(args.ckpt)
    naming = name_concepts(params, _vocab(args))
    out = Path(args.out)
    if args.format == "toml":
        doc = {"names": naming.names(), "similarity": naming.similarity.tolist()}
        out.write_text(tomli_w.dumps(doc), encoding="utf-8")
    else:
        with out.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["neuron", "term", "similarity"])
            for i, (t, s) in enumerate(zip(naming.names(), naming.similarity)):
                w.writerow([i, t, repr(float(s))])
    print(f"named {len(naming.term_index)} neurons")


def _tool_probe(args):
    from .embedding_store import read_meb
    from .interpret import name_concepts, probe_decompose

    params, _, _ = _load_ckpt(args.ckpt)
    probe = read_meb(_existing(args.probe, "probe MEB"))
    if probe.shape[0] != 1:
        raise ConfigError(f"probe file must hold one row, found {probe.shape[0]}")
    naming = name_concepts(params, _vocab(args)) if args.terms and args.vocab else None
    entries = probe_decompose(params, probe[0], args.top_m, naming)
    rows = [{"neuron": e.neuron, "coefficient": e.coefficient, **({"term": e.term} if e.term else {})}
            for e in entries]
    if args.out:
        Path(args.out).write_text(tomli_w.dumps({"entries": rows}), encoding="utf-8")
    for e in entries:
        print(f"{e.neuron}\t{e.coefficient:.6g}" + (f"\t{e.term}" if e.term else ""))


def _tool_steer(args):
    from .crossmodal_eval import cosine_matrix
    from .embedding_store import load_embeddings, write_meb
    from .interpret import steer
    from .sae_model import encode

    params, k, _ = _load_ckpt(args.ckpt)
    emb = load_embeddings(_existing(args.input, "input MEB"), expect_d=params.d)
    side = args.side
    decoded = np.stack([steer(params, encode(params, x, side, k), args.neuron, args.delta, side)
                        for x in emb.data])
    write_meb(args.out, decoded)
    print(f"wrote {decoded.shape[0]} steered vectors to {args.out}")
    if args.corpus:
        corpus = load_embeddings(_existing(args.corpus, "corpus MEB"), expect_d=params.d)
        unit = decoded / np.linalg.norm(decoded, axis=1, keepdims=True)
        best = np.argmax(cosine_matrix(unit, corpus.data), axis=1)
        for i, j in enumerate(best):
            print(f"{i}\t{int(j)}")


def _split_codes(params, x, side, tol):
    """Nonnegative least squares over the atoms a split model switches on for ``x``."""
    from scipy.optimize import nnls

    from .sae_model import pre_activations

    on = np.flatnonzero(pre_activations(params, x, side) > 0)
    if on.size == 0:
        raise ConfigError("input activates no neuron; cannot refit its code")
    coef, _ = nnls(params.w_dec[:, on], x)
    z = np.zeros(params.p)
    z[on] = coef
    z[np.abs(z) < tol * 1e-3] = 0.0
    return z


def _tool_augment_dict(args):
    from .dict_theory import DecomposedPair, augment_split_dictionary, is_modality_split, min_code_inner
    from .embedding_store import read_meb
    from .sae_model import SparseCode, save_checkpoint

    params, k, meta = _load_ckpt(args.input)
    rows = read_meb(_existing(args.pairs, "pairs MEB"), expect_d=params.d)
    if rows.shape[0] % 2:
        raise ConfigError(f"pairs file must hold interleaved x, y rows; found {rows.shape[0]} rows")
    norms = np.linalg.norm(params.w_dec, axis=0)
    atoms = params.w_dec / norms
    if args.codes:
        codes = read_meb(_existing(args.codes, "codes MEB"))
        if codes.shape != (rows.shape[0], params.p):
            raise ConfigError(f"codes must have shape {(rows.shape[0], params.p)}, got {codes.shape}")
        codes = codes * norms
    else:
        unit = params.copy()
        unit.w_dec = atoms
        codes = np.stack([_split_codes(unit, r, "a" if i % 2 == 0 else "b", args.tol)
                          for i, r in enumerate(rows)])
    pairs = [DecomposedPair.build(atoms, rows[i], rows[i + 1],
                                  SparseCode.from_dense(codes[i]), SparseCode.from_dense(codes[i + 1]))
             for i in range(0, rows.shape[0], 2)]
    split, where = is_modality_split(pairs)
    if not split:
        raise ConfigError(f"pair {where} already shares an atom; the dictionary is not split on it")
    dic, out_pairs = augment_split_dictionary(atoms, pairs, args.c, tol=args.tol)
    worst = min_code_inner(out_pairs)
    print(f"atoms {params.p} -> {dic.p}; min code inner product {worst:.6g}")
    if not worst > 0:
        from .errors import ConsistencyError

        raise ConsistencyError("augmented codes do not overlap")
    if args.out:
        from .sae_model import SaeParams

        extra = dic.p - params.p
        grown = SaeParams(np.vstack([params.w_enc, dic.atoms[:, params.p:].T]), dic.atoms,
                          np.concatenate([params.b_enc, np.zeros(extra)]),
                          params.b_pre_a, params.b_pre_b)
        save_checkpoint(args.out, grown, k, {**meta, "augmented_from": int(params.p)})
        print(f"wrote {args.out}")


def _tool_synth_gen(args):
    from .crossmodal_eval import write_labels
    from .dict_theory import is_modality_split
    from .embedding_store import save_embeddings, save_paired, write_manifest, write_meb
    from .sae_model import save_checkpoint
    from .synth_bench import (
        SynthSpec, class_prompts, decomposed_pairs, generate, save_truth, scorer_view, split_model,
    )

    mods = tuple(m.strip() for m in args.modalities.split(","))
    spec = SynthSpec(d=args.d, p_true=args.p_true, s=args.s, n_pairs=args.n_pairs,
                     noise_sigma=args.noise, modality_offset_scale=args.offset,
                     c_target=args.c_target, regime=args.regime,
                     n_classes=args.n_classes or None, seed=args.seed, modalities=mods)
    ds, truth = generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_paired(out / "data.toml", ds)
    save_truth(out / "truth.mst", truth)
    if spec.regime == "shared":
        save_paired(out / "scorer.toml", scorer_view(ds, truth, seed=args.seed))
        pa = out / f"data_{mods[0]}.meb"
        pb = out / f"data_{mods[1]}.meb"
        write_labels(out / "retrieval_gt.lbl", np.arange(ds.n_pairs))
        (out / "retrieval.toml").write_text(tomli_w.dumps({
            "queries": {"path": pb.name, "modality": mods[1]},
            "corpus": {"path": pa.name, "modality": mods[0]},
            "ground_truth": {"path": "retrieval_gt.lbl"}}), encoding="utf-8")
        if spec.n_classes:
            save_embeddings(out / "prompts.meb", class_prompts(truth, "b"))
            write_labels(out / "labels.lbl", truth.labels)
            (out / "zeroshot.toml").write_text(tomli_w.dumps({
                "classes": {"path": "prompts.meb", "modality": mods[1]},
                "test": {"path": pa.name, "modality": mods[0]},
                "labels": {"path": "labels.lbl"}}), encoding="utf-8")
    else:
        inter = np.empty((2 * ds.n_pairs, ds.d))
        inter[0::2], inter[1::2] = ds.side_a.data, ds.side_b.data
        codes = np.empty((2 * ds.n_pairs, spec.p_true))
        codes[0::2], codes[1::2] = truth.dense_codes("a"), truth.dense_codes("b")
        write_meb(out / "pairs.meb", inter)
        write_meb(out / "codes.meb", codes)
        model = split_model(spec.d, spec.p_true, seed=args.seed, dictionary=truth.dictionary)
        save_checkpoint(out / "split.msc", model, spec.s, {"variant": "split", "seed": args.seed,
                                                          "modalities": list(mods)})
        split, where = is_modality_split(decomposed_pairs(ds, truth))
        print(f"modality split: {split}" + ("" if split else f" (pair {where} shares atoms)"))
    print(f"wrote {spec.regime} dataset with {ds.n_pairs} pairs to {out}")


_TOOLS = {
    "name-concepts": _tool_name_concepts, "probe": _tool_probe, "steer": _tool_steer,
    "augment-dict": _tool_augment_dict, "synth-gen": _tool_synth_gen,
}

_MODULE_OF = {
    "name-concepts": "interpret", "probe": "interpret", "steer": "interpret",
    "augment-dict": "dict_theory", "synth-gen": "synth_bench",
}


def cmd_tools(args):
    _TOOLS[args.tool](args)
    return EXIT_OK


# --------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="mmsae", description="Multimodal sparse autoencoders on paired embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an SAE, GSAE or MGSAE on a paired manifest")
    t.add_argument("--manifest", required=True, help="paired dataset manifest (TOML)")
    t.add_argument("--out", required=True, help="checkpoint path (MSC1)")
    t.add_argument("--log", help="training log path (default: <out>.log)")
    t.add_argument("--config", help="TOML file of TrainConfig values; flags override it")
    t.add_argument("--variant", type=str.upper, choices=["SAE", "GSAE", "MGSAE"],
                   help="model variant (default MGSAE)")
    t.add_argument("--k", type=int, help="active latents per code (default 32)")
    t.add_argument("--expansion", type=int, help="dictionary size as a multiple of d (default 16)")
    t.add_argument("--lambda", dest="lambda_gs", type=float,
                   help="group-sparse weight (default 0.05; forced 0 for SAE)")
    t.add_argument("--p-mask", dest="p_mask", type=float,
                   help="masking probability (default 0.1 with audio, else 0.2; forced 0 for SAE/GSAE)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    t.add_argument("--steps", type=int, help="optimizer steps (default 25000)")
    t.add_argument("--batch-size", dest="batch_size", type=int, help="pairs per batch (default 128)")
    t.add_argument("--seed", type=int, help="seed for init, batching and masks (default 0)")
    t.add_argument("--log-every", dest="log_every", type=int, help="steps between log records (default 100)")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   help="steps between periodic checkpoints, 0 = only at the end")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("what", choices=["dead", "mms", "zeroshot", "retrieval", "align"],
                   help="which evaluation to run")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--val", help="validation manifest (dead, mms, align)")
    e.add_argument("--scorer", help="scorer-encoder manifest with the same rows (mms)")
    e.add_argument("--pair", default="image,text", help="modality pair m,n for mms")
    e.add_argument("--dense", action="store_true", help="mms on raw embedding coordinates (no SAE)")
    e.add_argument("--task", help="zero-shot or retrieval task manifest")
    e.add_argument("--k", type=int, help="override the checkpoint's k")
    e.add_argument("--out", help="report path (default <what>.<format>)")
    e.add_argument("--format", choices=["toml", "csv"], default="toml", help="report format")
    e.set_defaults(func=cmd_eval)

    tl = sub.add_parser("tools", help="interpretation and synthetic-data utilities")
    tools = tl.add_subparsers(dest="tool", required=True, parser_class=_Parser)

    nc = tools.add_parser("name-concepts", help="label each neuron with its closest vocabulary term")
    nc.add_argument("--ckpt", required=True, help="checkpoint path")
    nc.add_argument("--terms", required=True, help="UTF-8 file, one term per line")
    nc.add_argument("--vocab", required=True, help="MEB file of term embeddings")
    nc.add_argument("--out", required=True, help="output path")
    nc.add_argument("--format", choices=["toml", "csv"], default="toml", help="output format")

    pr = tools.add_parser("probe", help="decompose a linear probe onto dictionary concepts")
    pr.add_argument("--ckpt", required=True, help="checkpoint path")
    pr.add_argument("--probe", required=True, help="MEB file with one probe row")
    pr.add_argument("--top-m", dest="top_m", type=int, default=10, help="concepts to report")
    pr.add_argument("--terms", help="terms file for naming (with --vocab)")
    pr.add_argument("--vocab", help="term embeddings for naming (with --terms)")
    pr.add_argument("--out", help="optional TOML output")

    st = tools.add_parser("steer", help="shift one neuron of each code and decode")
    st.add_argument("--ckpt", required=True, help="checkpoint path")
    st.add_argument("--input", required=True, help="MEB file of embeddings to steer")
    st.add_argument("--side", choices=["a", "b"], default="a", help="which side's pre-bias to use")
    st.add_argument("--neuron", type=int, required=True, help="neuron index")
    st.add_argument("--delta", type=float, required=True, help="amount added to the neuron")
    st.add_argument("--corpus", help="optional MEB corpus; prints the best match per steered row")
    st.add_argument("--out", required=True, help="output MEB of decoded vectors (not renormalized)")

    ad = tools.add_parser("augment-dict", help="grow a split dictionary until all paired codes overlap")
    ad.add_argument("--in", dest="input", required=True, help="checkpoint holding the split model")
    ad.add_argument("--pairs", required=True, help="MEB file of interleaved x, y rows")
    ad.add_argument("--codes", help="MEB file of dense codes, rows matching --pairs")
    ad.add_argument("--c", type=float, required=True, help="lower bound on every <x, y>")
    ad.add_argument("--tol", type=float, default=1e-6, help="accepted decomposition residual")
    ad.add_argument("--out", help="optional checkpoint with the augmented dictionary")

    sg = tools.add_parser("synth-gen", help="write a synthetic paired dataset with planted truth")
    sg.add_argument("--out-dir", required=True, help="output directory")
    sg.add_argument("--regime", choices=["shared", "split"], default="shared", help="support regime")
    sg.add_argument("--seed", type=int, default=0, help="generator seed")
    sg.add_argument("--d", type=int, default=32, help="embedding dimension")
    sg.add_argument("--p-true", dest="p_true", type=int, default=64, help="planted dictionary size")
    sg.add_argument("--s", type=int, default=8, help="support size per sample")
    sg.add_argument("--n-pairs", dest="n_pairs", type=int, default=1000, help="number of pairs")
    sg.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std per coordinate")
    sg.add_argument("--offset", type=float, default=0.0, help="norm of the per-modality offsets")
    sg.add_argument("--c-target", dest="c_target", type=float, default=0.3,
                    help="split regime: every pair has <x, y> above this")
    sg.add_argument("--n-classes", dest="n_classes", type=int, default=0,
                    help="planted zero-shot classes (shared regime), 0 = none")
    sg.add_argument("--modalities", default="image,text", help="modality labels a,b")
    tl.set_defaults(func=cmd_tools)
    return p


def _limits():
    threads = os.environ.get("MMSAE_THREADS")
    if not threads:
        return nullcontext()
    try:
        n = int(threads)
    except ValueError:
        raise ConfigError(f"MMSAE_THREADS must be an integer, got {threads!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def _prefix(args):
    if args.command == "tools":
        return f"mmsae tools {args.tool} ({_MODULE_OF[args.tool]})"
    return f"mmsae {args.command}"


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _limits():
            return args.func(args)
    except TrainingDiverged as err:
        print(f"{_prefix(args)}: training diverged at step {err.step}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as err:
        print(f"{_prefix(args)}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"{_prefix(args)}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MmsaeError, OSError) as err:
        print(f"{_prefix(args)}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
