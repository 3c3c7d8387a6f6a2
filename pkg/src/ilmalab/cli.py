"""``ilmalab`` command line: one pipeline stage per subcommand.

Typical sequence::

    ilmalab gen    --config lab.ini --out data/
    ilmalab ilmt   --config lab.ini --out ilmt.ckpt
    ilmalab ilma   --config lab.ini --checkpoint ilmt.ckpt --scope joiner --rho 0.2 --out adapted.ckpt
    ilmalab decode --config lab.ini --checkpoint adapted.ckpt
    ilmalab report --config lab.ini --out report

Exit status: 0 success, 1 configuration error (message carries the line
number), 2 missing or unreadable checkpoint, 3 training diverged (NaN).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from .config import ExperimentConfig, default_config_text, load_config
from .corpus import Dataset, build_dataset, load_dataset, save_dataset
from .decoding import corpus_ter, evaluate, ilm_perplexity, train_external_lm
from .experiment import run_grid, train_models
from .training import AdaptScope, ConfigError, TrainingDiverged, adapt_ilma, train_baseline, train_ilmt

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 1, 2, 3


class MissingCheckpoint(Exception):
    pass


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _data(cfg: ExperimentConfig, args) -> Dataset:
    directory = getattr(args, "data", None) or cfg.paths.data
    if directory and (Path(directory) / "vocab.txt").exists():
        return load_dataset(directory, cfg.data)
    return build_dataset(cfg.data)


def _load(path: str | None):
    if not path:
        raise MissingCheckpoint("no checkpoint given (use --checkpoint)")
    if not Path(path).is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    try:
        return ckpt.load_model(path)
    except ckpt.CheckpointError as err:
        raise MissingCheckpoint(f"unreadable checkpoint {path}: {err}") from None


def _tsv_printer(out=None):
    header: list[str] = []

    def emit(row: dict) -> None:
        stream = out or sys.stdout
        if not header:
            header.extend(row)
            print("\t".join(header), file=stream, flush=True)
        print("\t".join(_cell(row.get(k, "")) for k in header), file=stream, flush=True)

    return emit


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    return Path(args.out)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    data = build_dataset(cfg.data)
    for path in save_dataset(data, _require_out(args)):
        print(path)
    return EXIT_OK


def _train(args, stage: str) -> int:
    cfg = _resolve(args)
    out = _require_out(args)
    train_cfg = replace(cfg.train, stage=stage)
    if args.alpha is not None:
        train_cfg = replace(train_cfg, alpha=args.alpha)
    data = _data(cfg, args)
    fit = train_ilmt if stage == "ilmt" else train_baseline
    model = fit(data.source_train, train_cfg, cfg.model, dev_pairs=data.source_test, report=_tsv_printer())
    ckpt.save_checkpoint(model, out, stage=stage, alpha=train_cfg.alpha if stage == "ilmt" else 0.0,
                         seed=train_cfg.seed, vocab=list(data.vocab.tokens))
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    return _train(args, "baseline")


def cmd_ilmt(args) -> int:
    return _train(args, "ilmt")


def cmd_ilma(args) -> int:
    cfg = _resolve(args)
    out = _require_out(args)
    model, meta = _load(args.checkpoint)
    ilma_cfg = cfg.ilma
    if args.rho is not None:
        ilma_cfg = replace(ilma_cfg, rho=args.rho)
    if args.scope is not None:
        ilma_cfg = replace(ilma_cfg, scope=AdaptScope.parse(args.scope))
    ilma_cfg.validate()
    regime = meta.get("regime", meta.get("stage", "unknown"))
    if regime != "ilmt":
        print(f"warning: {args.checkpoint} was not trained with ILMT (regime={regime}); "
              "ILMA results for this regime are flagged", file=sys.stderr)
    data = _data(cfg, args)
    adapted = adapt_ilma(model, data.adapt_text, ilma_cfg, report=_tsv_printer())
    ckpt.save_checkpoint(adapted, out, stage="ilma", regime=regime, rho=ilma_cfg.rho,
                         scope=ilma_cfg.scope.value, seed=ilma_cfg.seed, vocab=meta.get("vocab"))
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _resolve(args)
    model, meta = _load(args.checkpoint)
    beam = args.beam if args.beam is not None else cfg.decode.beam
    if beam < 1:
        raise ConfigError("beam must be >= 1")
    lm, lam = None, 0.0
    if args.lm:
        if not Path(args.lm).is_file():
            raise MissingCheckpoint(f"external LM not found: {args.lm}")
        lm, _ = ckpt.load_external_lm(args.lm)
        lam = args.lam if args.lam is not None else cfg.decode.lam
    elif args.lam:
        raise ConfigError("--lam needs --lm")
    data = _data(cfg, args)
    utts = data.target_test if args.split == "target" else data.source_test
    results = evaluate(model, utts, beam, lm, lam, cfg.decode.u_max)
    lines = [r.tsv(data.vocab) for r in results]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    regime = meta.get("regime", meta.get("stage"))
    flag = "" if regime in ("ilmt", None) else f"\tregime={regime} (no ILMT)"
    print(f"TER\t{corpus_ter(results)!r}\tsplit={args.split}\tbeam={beam}\tlam={lam!r}{flag}", file=sys.stderr)
    return EXIT_OK


def cmd_ppl(args) -> int:
    cfg = _resolve(args)
    model, _ = _load(args.checkpoint)
    data = _data(cfg, args)
    print("text\tsentences\tilm_ppl")
    for name, text in (
        ("source_dev", data.source_dev_text),
        ("adapt", data.adapt_text),
        ("target_test", [u.tokens for u in data.target_test]),
    ):
        print(f"{name}\t{len(text)}\t{ilm_perplexity(model, text)!r}")
    return EXIT_OK


def cmd_lm(args) -> int:
    cfg = _resolve(args)
    out = _require_out(args)
    data = _data(cfg, args)
    lm = train_external_lm(data.adapt_text, data.vocab.size, cfg.data.seed, cfg.lm.epochs, cfg.lm.batch_size, cfg.lm.lr)
    ckpt.save_external_lm(lm, out, seed=cfg.data.seed, vocab=list(data.vocab.tokens))
    ppl = lm.perplexity([u.tokens for u in data.target_test])
    print(f"external_lm\ttarget_test_ppl\t{ppl!r}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _resolve(args)
    out = _require_out(args)
    data = _data(cfg, args)
    progress = (lambda msg: print(msg, file=sys.stderr, flush=True)) if not args.quiet else None
    models = {}
    for regime, path in (("baseline", args.baseline), ("ilmt", args.ilmt)):
        if path:
            models[regime] = _load(path)[0]
    missing = tuple(r for r in ("baseline", "ilmt") if r not in models)
    models.update(train_models(cfg, data, progress, regimes=missing))
    report = run_grid(models, data, cfg, progress)
    txt, tsv = report.write(out)
    sys.stdout.write(report.render())
    print(f"wrote {txt} and {tsv}", file=sys.stderr)
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _resolve(args)
    sys.stdout.write(default_config_text(cfg))
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "generate the synthetic corpora into --out DIR"),
    "train": (cmd_train, "train the baseline transducer (E2E loss only)"),
    "ilmt": (cmd_ilmt, "train with the ILMT loss (E2E + alpha x ILM)"),
    "ilma": (cmd_ilma, "adapt a checkpoint's internal LM on target-domain text"),
    "decode": (cmd_decode, "beam-search decode a test split, one TSV line per utterance"),
    "ppl": (cmd_ppl, "internal-LM perplexity of a checkpoint"),
    "lm": (cmd_lm, "train the external LM used for shallow fusion"),
    "report": (cmd_report, "run the full regime x scope x rho grid and write the report"),
    "config": (cmd_config, "print the effective configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides every seed in the config")
    common.add_argument("--out", help="output file, directory or report prefix")
    common.add_argument("--data", help="corpus directory from `gen` (otherwise regenerated from the seed)")

    parser = argparse.ArgumentParser(prog="ilmalab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    for name in ("ilma", "decode", "ppl"):
        parsers[name].add_argument("--checkpoint", help="input model checkpoint")
    for name in ("train", "ilmt"):
        parsers[name].add_argument("--alpha", type=float, help="ILM loss weight (ilmt only; default from config)")
    parsers["ilma"].add_argument("--rho", type=float, help="KLD regularisation weight in [0, 1]")
    parsers["ilma"].add_argument("--scope", choices=[s.value for s in AdaptScope], help="parameters to adapt")
    parsers["decode"].add_argument("--beam", type=int, help="beam size (default 5)")
    parsers["decode"].add_argument("--lm", help="external LM checkpoint for shallow fusion")
    parsers["decode"].add_argument("--lam", type=float, help="shallow-fusion LM weight")
    parsers["decode"].add_argument("--split", choices=("target", "source"), default="target")
    parsers["report"].add_argument("--baseline", help="reuse this baseline checkpoint instead of training")
    parsers["report"].add_argument("--ilmt", help="reuse this ILMT checkpoint instead of training")
    parsers["report"].add_argument("--quiet", action="store_true", help="no progress messages")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
