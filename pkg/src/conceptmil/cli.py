"""Command-line entry point: ``conceptmil <command> [--config FILE] [flags]``.

Commands: gen-synth, prior, pretrain, eval, explain. A config file holds
``key = value`` lines (keys spelled like the flags, dashes or underscores);
flags given on the command line win. Exit codes: 0 ok, 2 configuration or
usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from .conceptprior import ConceptSet, cosine_prior
from .dataio import (
    CheckpointError,
    MatrixFormatError,
    DatasetManifest,
    SynthConfig,
    compute_priors,
    dump_json,
    generate_synthetic,
    load_bag,
    load_checkpoint,
    load_concept_set,
    load_json,
    load_manifest,
    prior_path,
    read_matrix,
    save_checkpoint,
    write_synthetic,
)
from .evalkit import (
    EvalProtocol,
    EvalSlide,
    UndefinedMetricError,
    concept_table,
    concept_topj_accuracy,
    encode_slides,
    roc_curve,
    run_protocol,
    zero_shot_predict,
)
from .model import DualMIL, ModelConfig
from .pretrainer import ContrastiveConfig, TrainingSlide, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PRIORS_SCHEMA = "gecko-priors/1"
REPORT_SCHEMA = "gecko-report/1"
EXPLAIN_SCHEMA = "gecko-explain/1"
TRACE_SCHEMA = "gecko-loss-trace/1"

log = logging.getLogger("conceptmil")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Opt:
    flag: str
    type: type = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


MODEL_OPTS = [
    Opt("--k", int, 10, "patches kept by the Top-K selector"),
    Opt("--sigma", float, 0.05, "Top-K perturbation scale"),
    Opt("--n-samples", int, 100, "Top-K Monte-Carlo samples"),
    Opt("--hidden", int, 512, "deep-branch embedding width"),
    Opt("--attn-hidden", int, 512, "gated-attention width"),
    Opt("--mixer-layers", int, 4),
    Opt("--mixer-hidden", int, 64),
    Opt("--gate-hidden", int, 64),
    Opt("--aux-hidden", int, 512),
    Opt("--variant", str, "gecko", "concept-branch variant", ("gecko", "dual_abmil")),
]

SEED = Opt("--seed", int, None, "single source of all randomness", required=True)
DATA_OPTS = [
    Opt("--manifest", str, None, "dataset manifest JSON", required=True),
    Opt("--priors", str, None, "directory written by `prior` (computed on the fly if omitted)"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-synth": [
        Opt("--out", str, None, "output directory", required=True),
        Opt("--classes", int, 2),
        Opt("--per-class", int, 100, "slides per class"),
        Opt("--n", int, 64, "patches per slide"),
        Opt("--d", int, None, "embedding dimension", required=True),
        Opt("--c-per-class", int, 10, "concepts per class"),
        Opt("--rho", float, 0.25, "salient patch fraction"),
        Opt("--signal", float, 2.0),
        Opt("--noise", float, 0.3),
        Opt("--concept-noise", float, 0.05),
        Opt("--test-fraction", float, 0.3),
        Opt("--background-types", int, 0, "shared background prototypes (0 = isotropic noise)"),
        Opt("--background-noise", float, 0.3),
        Opt("--aux-dim", int, None, "emit a class-conditioned auxiliary vector per slide"),
        Opt("--seed", int, 0),
    ],
    "prior": DATA_OPTS[:1] + [Opt("--out", str, None, "output directory", required=True)],
    "pretrain": DATA_OPTS + [
        Opt("--out", str, None, "output directory", required=True),
        SEED,
        Opt("--tau", float, 0.07),
        Opt("--r-keep", float, 0.7, "false-negative keep ratio"),
        Opt("--epochs", int, 50),
        Opt("--batch", int, 64),
        Opt("--lr", float, 1e-4, "peak learning rate"),
        Opt("--lr-floor", float, 1e-8),
        Opt("--warmup", int, 5, "warmup epochs"),
        Opt("--modality", str, "wsi_only", "input modalities", ("wsi_only", "wsi_plus_aux")),
        Opt("--pretrain-split", str, "train", "slides used for pretraining", ("train", "all")),
    ] + MODEL_OPTS,
    "eval": DATA_OPTS + [
        Opt("--checkpoint", str, None, required=True),
        SEED,
        Opt("--mode", str, "zero", "label protocol", ("zero", "few", "full")),
        Opt("--k", int, 10, "labelled slides per class for --mode few"),
        Opt("--reps", int, 10, "repetitions for --mode few"),
        Opt("--folds", int, 1, "stratified folds (1 = use the manifest's test split)"),
        Opt("--raw", int, 0, "1 = skip clamping in the label-free rule"),
        Opt("--out", str, None, "report JSON path", required=True),
        Opt("--roc-csv", str, None, "ROC curve of the label-free head"),
    ],
    "explain": DATA_OPTS + [
        Opt("--checkpoint", str, None, required=True),
        Opt("--top-j", int, 5, "concept rows per slide"),
        Opt("--slides", str, None, "comma-separated slide ids (default: all)"),
        Opt("--out", str, None, "optional JSON dump"),
    ],
}

HELP = {
    "gen-synth": "write a synthetic dataset with planted concepts",
    "prior": "compute patch-concept similarity priors",
    "pretrain": "contrastive dual-branch pretraining",
    "eval": "label-free and probe evaluation",
    "explain": "per-slide concept rankings and selected patches",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--threads", type=int, help="cap on BLAS threads")
        p.add_argument("-v", "--verbose", action="store_true")
        for o in opts:
            shown = o.help + (f" (default {o.default})" if o.default is not None else "")
            p.add_argument(o.flag, type=o.type, choices=o.choices, default=None, help=shown.strip())
    return parser


def parse_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags into a fully typed RunConfig dict."""
    opts = {o.dest: o for o in COMMANDS[command]}
    from_file = parse_config_file(args.config) if args.config else {}
    unknown = sorted(set(from_file) - set(opts) - {"threads"})
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    rc = {"command": command}
    for dest, o in opts.items():
        value = getattr(args, dest)
        if value is None and dest in from_file:
            try:
                value = o.type(from_file[dest])
            except ValueError:
                raise ConfigError(f"config key {dest}: cannot parse {from_file[dest]!r} as {o.type.__name__}")
            if o.choices and value not in o.choices:
                raise ConfigError(f"config key {dest}: {value!r} not in {o.choices}")
        if value is None:
            value = o.default
        if value is None and o.required:
            raise ConfigError(f"{command}: {o.flag} is required")
        rc[dest] = value
    threads = args.threads if args.threads is not None else from_file.get("threads")
    rc["threads"] = int(threads) if threads is not None else None
    return rc


# -- shared loading ------------------------------------------------------------------

def _load_dataset(rc: dict) -> tuple[DatasetManifest, ConceptSet]:
    manifest = load_manifest(rc["manifest"])
    concepts = load_concept_set(manifest.resolve(manifest.concepts_path))
    if concepts.dim != manifest.D or concepts.n_concepts != manifest.C:
        raise ConfigError(f"concept set is {concepts.n_concepts} x {concepts.dim}, manifest declares C={manifest.C}, D={manifest.D}")
    return manifest, concepts


def _priors_for(rc: dict, manifest: DatasetManifest, concepts: ConceptSet):
    """Yield (record, features, prior) for every manifest slide."""
    prior_dir = Path(rc["priors"]) if rc.get("priors") else None
    if prior_dir is not None:
        doc = load_json(prior_dir / "priors.json")
        if doc.get("schema") != PRIORS_SCHEMA:
            raise DataError(f"{prior_dir}: not a priors directory")
    for rec in manifest.slides:
        bag = load_bag(manifest, rec)
        if prior_dir is None:
            prior = cosine_prior(bag.features, concepts.embeddings)
        else:
            prior = read_matrix(prior_path(prior_dir, rec.slide_id))
            if prior.shape != (len(bag.features), concepts.n_concepts):
                raise ConfigError(f"slide {rec.slide_id}: prior is {prior.shape}, expected {(len(bag.features), concepts.n_concepts)}")
        yield rec, bag.features, prior


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands ------------------------------------------------------------------------

def cmd_gen_synth(rc: dict) -> None:
    cfg = SynthConfig(
        n_classes=rc["classes"], n_slides_per_class=rc["per_class"], n_patches=rc["n"], dim=rc["d"],
        concepts_per_class=rc["c_per_class"], salient_fraction=rc["rho"], signal=rc["signal"],
        noise=rc["noise"], concept_noise=rc["concept_noise"], test_fraction=rc["test_fraction"],
        background_types=rc["background_types"], background_noise=rc["background_noise"],
        aux_dim=rc["aux_dim"], seed=rc["seed"],
    )
    ds = generate_synthetic(cfg)
    write_synthetic(ds, rc["out"], name="synthetic", run_config=rc)
    print(f"wrote {len(ds.bags)} slides, C={ds.concepts.n_concepts}, D={ds.concepts.dim} to {rc['out']}")


def cmd_prior(rc: dict) -> None:
    manifest, concepts = _load_dataset(rc)
    out = Path(rc["out"])
    paths = compute_priors(manifest, concepts, out)
    dump_json({"schema": PRIORS_SCHEMA, "run_config": rc,
               "slides": {rec.slide_id: p.name for rec, p in zip(manifest.slides, paths)}}, out / "priors.json")
    print(f"wrote {len(paths)} priors ({concepts.n_concepts} concepts) to {out}")


def cmd_pretrain(rc: dict, argv: list[str]) -> None:
    manifest, concepts = _load_dataset(rc)
    use_aux = rc["modality"] == "wsi_plus_aux"
    records = [r for r in manifest.slides if rc["pretrain_split"] == "all" or r.split != "test"]
    if use_aux:
        missing = [r.slide_id for r in records if not r.aux_path]
        if missing:
            raise ConfigError(f"--modality wsi_plus_aux but {len(missing)} slides lack aux_path (first: {missing[0]})")
    keep = {r.slide_id for r in records}
    slides = []
    for rec, F, M in _priors_for(rc, manifest, concepts):
        if rec.slide_id in keep:
            aux = read_matrix(manifest.resolve(rec.aux_path)).ravel() if use_aux else None
            slides.append(TrainingSlide(rec.slide_id, F, M, aux))
    aux_dims = {s.aux.size for s in slides if s.aux is not None}
    if len(aux_dims) > 1:
        raise DataError(f"aux vectors have inconsistent lengths {sorted(aux_dims)}")
    model_cfg = ModelConfig(
        in_dim=manifest.D, n_concepts=manifest.C, hidden=rc["hidden"], attn_hidden=rc["attn_hidden"],
        k=rc["k"], sigma=rc["sigma"], n_samples=rc["n_samples"], mixer_layers=rc["mixer_layers"],
        mixer_hidden=rc["mixer_hidden"], gate_hidden=rc["gate_hidden"], variant=rc["variant"],
        aux_dim=aux_dims.pop() if aux_dims else None, aux_hidden=rc["aux_hidden"], seed=rc["seed"],
    )
    train_cfg = ContrastiveConfig(
        tau=rc["tau"], r_keep=rc["r_keep"], batch_size=rc["batch"], epochs=rc["epochs"], lr_peak=rc["lr"],
        lr_floor=rc["lr_floor"], warmup_epochs=rc["warmup"], seed=rc["seed"],
    )
    print(f"pretraining {rc['variant']} on {len(slides)} slides for {train_cfg.epochs} epochs")
    result = train(slides, DualMIL(model_cfg), train_cfg, use_aux=use_aux)
    out = Path(rc["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", result.model,
                    {"run_config": rc, "argv": argv, "train_config": asdict(train_cfg),
                     "n_slides": len(slides), "final_loss": result.epoch_losses[-1]})
    lines = [f"# {TRACE_SCHEMA}", f"# run_config: {json.dumps(rc, sort_keys=True)}", "epoch,mean_loss"]
    lines += [f"{i + 1},{v!r}" for i, v in enumerate(result.epoch_losses)]
    (out / "loss_trace.csv").write_text("\n".join(lines) + "\n")
    dump_json(rc, out / "run_config.json")
    print(f"final epoch loss {result.epoch_losses[-1]:.5f}; checkpoint in {out}")


def _encode(rc: dict):
    manifest, concepts = _load_dataset(rc)
    model, meta = load_checkpoint(rc["checkpoint"], concepts=concepts, in_dim=manifest.D)
    slides = [EvalSlide(rec.slide_id, F, M, rec.label, rec.split) for rec, F, M in _priors_for(rc, manifest, concepts)]
    return manifest, concepts, model, meta, slides, encode_slides(model, slides)


def _write_roc(path, probs: np.ndarray, labels: np.ndarray) -> None:
    rows = ["class,threshold,fpr,tpr"]
    classes = [1] if probs.shape[1] == 2 else range(probs.shape[1])
    for c in classes:
        fpr, tpr, thr = roc_curve(probs[:, c], labels == c)
        rows += [f"{c},{float(t)!r},{float(f)!r},{float(r)!r}" for t, f, r in zip(thr, fpr, tpr)]
    Path(path).write_text("\n".join(rows) + "\n")


def _fmt_auc(summary: dict) -> str:
    if summary["mean_auc"] is None:
        return "n/a"
    return f"{summary['mean_auc']:.4f} +/- {summary['std_auc']:.4f}"


def cmd_eval(rc: dict) -> None:
    manifest, concepts, model, meta, slides, emb = _encode(rc)
    mode = {"zero": "zero", "few": "few_k", "full": "full"}[rc["mode"]]
    protocol = EvalProtocol(mode, k=rc["k"], repetitions=rc["reps"], folds=rc["folds"], seed=rc["seed"],
                            clamp=not rc["raw"])
    result = run_protocol(emb, concepts, protocol)
    test = np.array([i for i, s in enumerate(emb.splits) if s == "test"]) if "test" in emb.splits else np.arange(len(slides))
    test = test[emb.labels[test] >= 0]
    report = {"schema": REPORT_SCHEMA, "run_config": rc, "checkpoint_sha256": _sha256(rc["checkpoint"]),
              "model_config": meta["model_config"], "result": result}
    if len(test):
        report["concept_top1_accuracy"] = concept_topj_accuracy(emb.concept[test], emb.labels[test], concepts, 1)
    dump_json(report, rc["out"])
    if rc["roc_csv"]:
        try:
            probs = zero_shot_predict(emb.concept[test], concepts, clamp=not rc["raw"])
            _write_roc(rc["roc_csv"], probs, emb.labels[test])
        except UndefinedMetricError as exc:
            raise DataError(f"cannot draw ROC: {exc}")
    for head, summary in result["heads"].items():
        print(f"{head:>8}: AUC {_fmt_auc(summary)}")
    if "concept_top1_accuracy" in report:
        print(f"top-1 concept accuracy: {report['concept_top1_accuracy']:.4f}")


def cmd_explain(rc: dict) -> None:
    if rc["top_j"] < 1:
        raise ConfigError("--top-j must be >= 1")
    manifest, concepts, model, meta, slides, emb = _encode(rc)
    wanted = set(rc["slides"].split(",")) if rc["slides"] else None
    if wanted:
        unknown = sorted(wanted - set(emb.slide_ids))
        if unknown:
            raise DataError(f"unknown slide ids: {', '.join(unknown)}")
    entries, hits, counted = [], 0, 0
    for i, sid in enumerate(emb.slide_ids):
        if wanted and sid not in wanted:
            continue
        table = concept_table(emb.concept[i], concepts, top=rc["top_j"])
        label = int(emb.labels[i]) if emb.labels[i] >= 0 else None
        top_class = int(concepts.class_of()[concepts.names.index(table[0][0])])
        if label is not None:
            counted += 1
            hits += top_class == label
        entries.append({"slide_id": sid, "label": label, "top1_class": top_class,
                        "concepts": [[n, v] for n, v in table],
                        "top_patches": [int(j) for j in emb.selected[i]]})
        print(f"{sid} (label {label}): patches {entries[-1]['top_patches']}")
        for name, value in table:
            print(f"    {value:+.4f}  {name}")
    if counted:
        print(f"top-1 concept in class partition: {hits}/{counted} = {hits / counted:.3f}")
    if rc["out"]:
        dump_json({"schema": EXPLAIN_SCHEMA, "run_config": rc, "slides": entries}, rc["out"])


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stdout, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        rc = resolve(args.command, args)
        with _threads(rc["threads"]):
            if args.command == "gen-synth":
                cmd_gen_synth(rc)
            elif args.command == "prior":
                cmd_prior(rc)
            elif args.command == "pretrain":
                cmd_pretrain(rc, argv)
            elif args.command == "eval":
                cmd_eval(rc)
            else:
                cmd_explain(rc)
    except dc.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MatrixFormatError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, dc.DimensionError, dc.ContractError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
