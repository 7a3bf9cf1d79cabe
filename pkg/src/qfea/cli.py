"""``qfea`` command-line interface.

Every subcommand writes a ``<command>.manifest.json`` next to its outputs;
``qfea replay <manifest>`` re-runs the recorded command line.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .audio_io import Protocol, parse_protocol, read_wav, write_protocol
from .dsp import FrameConfig
from .echo import (
    DEFAULT_BONA_CHAIN,
    DEFAULT_SPLIT,
    DEFAULT_SPOOF_CHAIN,
    ChainSyntaxError,
    CorpusConfig,
    detect_rahmonic_peaks,
    parse_chain,
    split_protocol,
    synthesize_corpus,
)
from .frontends import FRONTENDS, FrontendConfig, cepstrogram, spectrogram, write_feature
from .gmm import load_model, save_model
from .metrics import (
    TdcfCostModel,
    compute_eer,
    compute_min_tdcf,
    det_points,
    fuse_normalized,
    fuse_scores,
    read_scores,
    write_scores,
)
from .pipeline import (
    GmmConfig,
    MissingTrialsError,
    default_jobs,
    extract_corpus,
    load_features,
    score_features,
    train_from_features,
)

log = logging.getLogger("qfea")

# Central defaults for every stage (see README "Defaults").
DEFAULTS = {
    "seed": 7,
    "n_per_class": 200,
    "split": ",".join(str(f) for f in DEFAULT_SPLIT),
    "bona_chain": DEFAULT_BONA_CHAIN,
    "spoof_chain": DEFAULT_SPOOF_CHAIN,
    "frontend": dataclasses.asdict(FrontendConfig()),
    "corpus": dataclasses.asdict(CorpusConfig()),
    "gmm": dataclasses.asdict(GmmConfig()),
    "cost_model": dataclasses.asdict(TdcfCostModel()),
    "peaks": {"min_index": 8, "max_peaks": 8},
}


class UsageError(Exception):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def digest_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256_file(p)
        elif p.is_dir():
            h = hashlib.sha256()
            for f in sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith(".manifest.json")):
                h.update(str(f.relative_to(p)).encode())
                h.update(sha256_file(f).encode())
            out[str(p)] = h.hexdigest()
    return out


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict,
                   inputs=(), outputs=()) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "toolkit_version": __version__,
        "config": config,
        "inputs": digest_inputs(inputs),
        "outputs": [str(p) for p in outputs],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def frontend_config(args) -> FrontendConfig:
    return FrontendConfig(
        input_scale=args.input_scale,
        frame_ms=args.frame_ms,
        hop_ms=args.hop_ms,
        window=args.window,
        fft_len=args.fft_len,
        ceps_compression=args.ceps_compression,
        ceps_keep=args.ceps_keep,
        dct_out_len=args.dct_len,
        lfcc_filters=args.lfcc_filters,
        lfcc_coeffs=args.lfcc_coeffs,
        lfcc_deltas=not args.no_deltas,
    )


def chains(args, sample_rate_hz: int):
    out = []
    for flag, text in (("--bona-chain", args.bona_chain), ("--spoof-chain", args.spoof_chain)):
        try:
            out.append(parse_chain(text, sample_rate_hz))
        except ChainSyntaxError as exc:
            raise UsageError(f"{flag}: {exc}") from exc
    return out


def parse_split(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--split: {text!r} is not three comma-separated numbers") from exc
    if len(parts) != 3 or abs(sum(parts) - 1) > 1e-9 or min(parts) < 0:
        raise UsageError(f"--split: need three non-negative fractions summing to 1, got {text!r}")
    return parts


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    corpus_cfg = CorpusConfig(sample_rate_hz=args.sample_rate)
    bona, spoof = chains(args, args.sample_rate)
    fractions = parse_split(args.split)
    protocol = synthesize_corpus(args.seed, args.n_per_class, out, bona, spoof, corpus_cfg, jobs=args.jobs)
    outputs = [out / "wav", out / "protocol.txt"]
    for name, part in split_protocol(protocol, fractions).items():
        write_protocol(part, out / f"protocol_{name}.txt")
        outputs.append(out / f"protocol_{name}.txt")
    config = {"seed": args.seed, "n_per_class": args.n_per_class, "bona_chain": args.bona_chain,
              "spoof_chain": args.spoof_chain, "split": fractions, "corpus": dataclasses.asdict(corpus_cfg)}
    write_manifest(out, "synth", argv, config, outputs=outputs)
    log.info("wrote %d trials to %s", len(protocol), out)
    return 0


def cmd_extract(args, argv) -> int:
    protocol = parse_protocol(args.protocol)
    cfg = frontend_config(args)
    out = Path(args.out_dir)
    try:
        result = extract_corpus(args.frontend, protocol, args.audio_dir, out, cfg, args.force, args.jobs)
    except FileExistsError as exc:
        log.error("%s", exc)
        return 1
    print(f"extracted {len(result.written)}/{len(protocol)} trials with front-end {args.frontend}")
    for trial, err in result.failures.items():
        print(f"FAILED {trial}: {err}", file=sys.stderr)
    write_manifest(out, "extract", argv, {"frontend": args.frontend, **dataclasses.asdict(cfg)},
                   inputs=[args.protocol, args.audio_dir])
    return 1 if result.failures else 0


def cmd_train(args, argv) -> int:
    protocol = parse_protocol(args.protocol, "train")
    feats = load_features(protocol, args.features)
    gcfg = GmmConfig(args.components, args.seed, args.max_iters, args.tol)
    m_bona, m_spoof = train_from_features(protocol, feats, gcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(m_bona, out / "bonafide.qgmm")
    save_model(m_spoof, out / "spoof.qgmm")
    write_manifest(out, "train", argv, dataclasses.asdict(gcfg), inputs=[args.protocol, args.features])
    return 0


def cmd_score(args, argv) -> int:
    protocol = parse_protocol(args.protocol, "eval")
    models = Path(args.models)
    m_bona, m_spoof = load_model(models / "bonafide.qgmm"), load_model(models / "spoof.qgmm")
    scores = score_features(m_bona, m_spoof, protocol, load_features(protocol, args.features))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(scores, out)
    write_manifest(out.parent, f"score-{out.stem}", argv, {},
                   inputs=[args.protocol, args.features, models])
    return 0


def cmd_fuse(args, argv) -> int:
    sets = [read_scores(p) for p in args.scores]
    weights = None
    if args.weights:
        try:
            weights = [float(w) for w in args.weights.split(",")]
        except ValueError as exc:
            raise UsageError(f"--weights: {args.weights!r}") from exc
    if args.dev_scores:
        if len(args.dev_scores) != len(sets):
            raise UsageError("--dev-scores needs one file per --scores file")
        fused = fuse_normalized(sets, [read_scores(p) for p in args.dev_scores], weights)
    else:
        fused = fuse_scores(sets, weights)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(fused, out)
    write_manifest(out.parent, f"fuse-{out.stem}", argv,
                   {"weights": weights or "equal", "normalization": "dev z-norm" if args.dev_scores else "none"},
                   inputs=list(args.scores) + list(args.dev_scores or []))
    return 0


def evaluation_report(scores, protocol: Protocol, cost: TdcfCostModel) -> str:
    eer, eer_thr = compute_eer(scores, protocol)
    tdcf, tdcf_thr = compute_min_tdcf(scores, protocol, cost)
    bona, spoof = scores.split(protocol)
    lines = [
        f"trials: {bona.size} bonafide, {spoof.size} spoof",
        f"EER: {100 * eer:.3f} %  (threshold {eer_thr:.6f})",
        f"min-tDCF: {tdcf:.4f}  (threshold {tdcf_thr:.6f})",
        f"eer_pct={100 * eer:.6f}",
        f"eer_threshold={eer_thr:.6f}",
        f"min_tdcf={tdcf:.6f}",
        f"min_tdcf_threshold={tdcf_thr:.6f}",
    ]
    return "\n".join(lines) + "\n"


def cmd_eval(args, argv) -> int:
    protocol = parse_protocol(args.protocol, "eval")
    scores = read_scores(args.scores)
    cost = TdcfCostModel.from_file(args.cost_model) if args.cost_model else TdcfCostModel()
    labels = protocol.labels()
    missing = [t for t in scores.trial_ids if t not in labels]
    if missing:
        raise MissingTrialsError("protocol entry", missing)
    report = evaluation_report(scores, protocol, cost)
    sys.stdout.write(report)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    if args.det:
        rows = ["threshold\tfrr\tfar"] + [f"{t:.6f}\t{r:.6f}\t{a:.6f}" for t, r, a in det_points(scores, protocol)]
        Path(args.det).write_text("\n".join(rows) + "\n", encoding="utf-8")
    if args.report:
        write_manifest(Path(args.report).parent, f"eval-{Path(args.report).stem}", argv,
                       {"cost_model": dataclasses.asdict(cost)},
                       inputs=[args.scores, args.protocol] + ([args.cost_model] if args.cost_model else []))
    return 0


def cmd_analyze(args, argv) -> int:
    wave = read_wav(args.input)
    cfg = frontend_config(args)
    scaled = type(wave)(wave.samples * cfg.input_scale, wave.sample_rate_hz)
    frame = cfg.frame_config(wave.sample_rate_hz)
    cep = cepstrogram(scaled, frame, cfg.ceps_compression)
    report = detect_rahmonic_peaks(cep, args.min_index, args.max_peaks)
    text = report.to_tsv()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    outputs = [args.report] if args.report else []
    if args.dump_grids:
        grids = Path(args.dump_grids)
        grids.mkdir(parents=True, exist_ok=True)
        stem = Path(args.input).stem
        write_feature(spectrogram(scaled, frame), grids / f"{stem}.spec.qfea")
        write_feature(cep, grids / f"{stem}.ceps.qfea")
        outputs += [grids / f"{stem}.spec.qfea", grids / f"{stem}.ceps.qfea"]
    if args.report or args.dump_grids:
        where = Path(args.report).parent if args.report else Path(args.dump_grids)
        write_manifest(where, f"analyze-{Path(args.input).stem}", argv,
                       {"min_index": args.min_index, "max_peaks": args.max_peaks, **dataclasses.asdict(cfg)},
                       inputs=[args.input], outputs=outputs)
    return 0


def cmd_experiment(args, argv) -> int:
    """synth -> extract -> train -> score -> fuse -> eval, one directory."""
    out = Path(args.out)
    frontends = [f for f in args.frontends.split(",") if f]
    fused = [f for f in args.fuse.split(",") if f] if args.fuse else []
    unknown = [f for f in frontends if f not in FRONTENDS]
    if unknown:
        raise UsageError(f"--frontends: unknown front-end {unknown[0]!r}")
    if any(f not in frontends for f in fused):
        raise UsageError("--fuse may only name front-ends listed in --frontends")
    summary = out / "summary.tsv"
    if summary.exists() and not args.force:
        log.error("%s exists; use --force to rerun into the same directory", summary)
        return 1
    corpus = out / "corpus"
    stages = [["synth", "--seed", str(args.seed), "--n-per-class", str(args.n_per_class),
               "--out", str(corpus), "--bona-chain", args.bona_chain, "--spoof-chain", args.spoof_chain,
               "--split", args.split, "--jobs", str(args.jobs)]]
    for fe in frontends:
        feats, models = out / "features" / fe, out / "models" / fe
        stages.append(["extract", "--frontend", fe, "--protocol", str(corpus / "protocol.txt"),
                       "--audio-dir", str(corpus / "wav"), "--out-dir", str(feats), "--jobs", str(args.jobs)]
                      + (["--force"] if args.force else []))
        stages.append(["train", "--features", str(feats), "--protocol", str(corpus / "protocol_train.txt"),
                       "--out", str(models), "--components", str(args.components)])
        for part in ("dev", "eval"):
            stages.append(["score", "--models", str(models), "--features", str(feats),
                           "--protocol", str(corpus / f"protocol_{part}.txt"),
                           "--out", str(out / "scores" / f"{fe}_{part}.txt")])
    systems = list(frontends)
    if len(fused) > 1:
        name = "+".join(fused)
        systems.append(name)
        stages.append(["fuse", "--scores", *[str(out / "scores" / f"{f}_eval.txt") for f in fused],
                       "--dev-scores", *[str(out / "scores" / f"{f}_dev.txt") for f in fused],
                       "--out", str(out / "scores" / f"{name}_eval.txt")])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for name in systems:
        stages.append(["eval", "--scores", str(out / "scores" / f"{name}_eval.txt"),
                       "--protocol", str(corpus / "protocol_eval.txt"),
                       "--report", str(out / "reports" / f"{name}.txt")])
    for stage in stages:
        log.info("experiment stage: %s", " ".join(stage[:3]))
        with contextlib.redirect_stdout(io.StringIO()):
            rc = main(stage)
        if rc:
            print(f"qfea experiment: stage {stage[0]} failed", file=sys.stderr)
            return rc
    rows = ["system\teer_pct\tmin_tdcf"]
    for name in systems:
        report = (out / "reports" / f"{name}.txt").read_text(encoding="utf-8")
        values = dict(line.split("=", 1) for line in report.splitlines() if "=" in line)
        rows.append(f"{name}\t{values['eer_pct']}\t{values['min_tdcf']}")
    text = "\n".join(rows) + "\n"
    summary.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    write_manifest(out, "experiment", argv,
                   {"frontends": frontends, "fuse": fused, "components": args.components, "seed": args.seed,
                    "n_per_class": args.n_per_class, "split": args.split},
                   outputs=[summary])
    return 0


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    recorded = list(manifest["argv"])
    if recorded and recorded[0] == "replay":
        raise UsageError("refusing to replay a replay")
    if args.out:
        if "--out" not in recorded:
            raise UsageError("this manifest's command has no --out to redirect")
        recorded[recorded.index("--out") + 1] = args.out
    return main(recorded)


def _add_frontend_flags(p: argparse.ArgumentParser) -> None:
    d = FrontendConfig()
    g = p.add_argument_group("front-end options")
    g.add_argument("--input-scale", type=float, default=d.input_scale)
    g.add_argument("--frame-ms", type=float, default=d.frame_ms)
    g.add_argument("--hop-ms", type=float, default=d.hop_ms)
    g.add_argument("--window", choices=("hann", "hamming", "blackman", "rectangular"), default=d.window)
    g.add_argument("--fft-len", type=int, default=d.fft_len, help="0 = next power of two above the frame")
    g.add_argument("--ceps-compression", choices=("log1p", "log"), default=d.ceps_compression)
    g.add_argument("--ceps-keep", type=int, default=d.ceps_keep, help="keep this many quefrency bins (0 = all)")
    g.add_argument("--dct-len", type=int, default=d.dct_out_len)
    g.add_argument("--lfcc-filters", type=int, default=d.lfcc_filters)
    g.add_argument("--lfcc-coeffs", type=int, default=d.lfcc_coeffs)
    g.add_argument("--no-deltas", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfea", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qfea {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic bona fide / replay corpus")
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    p.add_argument("--n-per-class", type=int, default=DEFAULTS["n_per_class"])
    p.add_argument("--out", required=True)
    p.add_argument("--bona-chain", default=DEFAULT_BONA_CHAIN)
    p.add_argument("--spoof-chain", default=DEFAULT_SPOOF_CHAIN)
    p.add_argument("--sample-rate", type=int, default=CorpusConfig().sample_rate_hz)
    p.add_argument("--split", default=DEFAULTS["split"], help="train,dev,eval fractions")
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="compute one feature file per trial")
    p.add_argument("--frontend", choices=FRONTENDS, required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing feature files")
    p.add_argument("--jobs", type=int, default=default_jobs())
    _add_frontend_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the bona fide and spoof GMMs")
    p.add_argument("--features", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    gd = GmmConfig()
    p.add_argument("--components", type=int, default=gd.n_components)
    p.add_argument("--seed", type=int, default=gd.seed)
    p.add_argument("--max-iters", type=int, default=gd.max_iters)
    p.add_argument("--tol", type=float, default=gd.tol)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score trials with a trained model pair")
    p.add_argument("--models", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("fuse", help="fuse score files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--dev-scores", nargs="+", help="development score files for z-normalisation")
    p.add_argument("--weights", help="comma-separated, must sum to 1 (default equal)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="EER and min-tDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--cost-model", help="key=value file overriding TdcfCostModel fields")
    p.add_argument("--report")
    p.add_argument("--det", help="write the DET staircase as TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="rahmonic peak report and optional grid dumps for one WAV")
    p.add_argument("--input", required=True)
    p.add_argument("--report")
    p.add_argument("--dump-grids")
    p.add_argument("--min-index", type=int, default=DEFAULTS["peaks"]["min_index"])
    p.add_argument("--max-peaks", type=int, default=DEFAULTS["peaks"]["max_peaks"])
    _add_frontend_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("experiment", help="run the whole pipeline on a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    p.add_argument("--n-per-class", type=int, default=DEFAULTS["n_per_class"])
    p.add_argument("--bona-chain", default=DEFAULT_BONA_CHAIN)
    p.add_argument("--spoof-chain", default=DEFAULT_SPOOF_CHAIN)
    p.add_argument("--split", default=DEFAULTS["split"])
    p.add_argument("--frontends", default="spec,ceps,lfcc")
    p.add_argument("--fuse", default="ceps,spec", help="front-ends to fuse (empty = none)")
    p.add_argument("--components", type=int, default=GmmConfig().n_components)
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="redirect the recorded --out directory")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.error(str(exc))
    except (MissingTrialsError, ValueError, OSError) as exc:
        print(f"qfea {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
