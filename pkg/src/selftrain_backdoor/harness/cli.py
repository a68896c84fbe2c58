"""Command-line entry point: ``selftrain-backdoor <command> [options]``.

Exit codes: 0 success, 2 usage error, 30 config, 31 parameter validation,
40 missing input, 50/51 malformed or empty data, 60 training failure,
70 unexpected internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..dataio import load_dataset
from ..errors import ArtifactError, InputError
from ..sslcluster import load_encoder, simclr_config_dict
from ..trainer import load_checkpoint, save_checkpoint, set_determinism, set_device
from . import config as cfgmod
from . import pipeline
from .metrics import eval_model
from .report import report, render_text
from .runs import RunManifest, file_digest, seeds_of
from .sweep import aug_sweep, plot_sweep, write_sweep

log = logging.getLogger("selftrain_backdoor")

COMMANDS = ("poison-make", "pretrain", "selftrain", "ssl-selftrain", "aug-sweep", "eval", "report")
EXIT_INTERNAL = 70


def _common(p: argparse.ArgumentParser, data: bool = False, model: bool = False):
    p.add_argument("--config", help="YAML file of dotted config keys (may set 'profile')")
    p.add_argument("--profile", default="desk", help="base profile: desk, paper or paper-tinyimages")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="run directory (default: $SELFTRAIN_BACKDOOR_RUNS/<command>-<hash>)")
    p.add_argument("--dump-config", metavar="PATH", help="write the resolved config and exit")
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("--device", choices=("cpu", "cuda"), help="compute backend (overrides run.device)")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", help="data directory from poison-make (built in-run when omitted)")
    if model:
        p.add_argument("--model", help="pretrained checkpoint (pretrained in-run when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selftrain-backdoor",
                                     description="Backdoor poisoning and self-training defenses at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("poison-make", help="build, split and poison the data pools"))
    _common(sub.add_parser("pretrain", help="supervised training on the poisoned labeled pool"), data=True)
    _common(sub.add_parser("selftrain", help="self-training with strong augmentation"), data=True, model=True)
    p = sub.add_parser("ssl-selftrain", help="contrastive clustering then self-training")
    _common(p, data=True, model=True)
    p.add_argument("--encoder", help="reuse a trained contrastive encoder checkpoint")
    p = sub.add_parser("aug-sweep", help="SA/ASR of a poisoned model under each augmentation")
    _common(p, data=True, model=True)
    p.add_argument("--workers", type=int, default=1, help="parallel processes, one sweep entry each")
    p = sub.add_parser("eval", help="SA/ASR of a checkpoint")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test-clean", required=True)
    p.add_argument("--test-poisoned", required=True)
    p.add_argument("--target", type=int, required=True)
    p = sub.add_parser("report", help="tables from one or more run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", help="directory for the CSV and text tables")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> dict:
    overrides = cfgmod.parse_set(args.set)
    if args.deterministic is not None:
        overrides["run.deterministic"] = args.deterministic
    if args.device:
        overrides["run.device"] = args.device
    return cfgmod.resolve(args.profile, args.config, overrides)


def run_dir_for(args, cfg: dict) -> Path:
    if args.out:
        return Path(args.out)
    from ..dataio import default_run_root

    return default_run_root() / f"{args.command}-{cfgmod.config_hash(cfg)[:10]}"


def _data(args, cfg, out: Path, manifest: RunManifest):
    if args.data:
        data = pipeline.load_data(args.data)
        pm = Path(args.data) / "poison_manifest.json"
        if pm.exists():
            manifest.poison_manifest = {"path": str(pm), "sha256": file_digest(pm)}
    else:
        data = pipeline.build_data(cfg)
        pipeline.save_data(data, out / "data")
        manifest.poison_manifest = {"path": "data/poison_manifest.json",
                                    "sha256": file_digest(out / "data" / "poison_manifest.json")}
    manifest.datasets = data.checksums()
    return data


def _pretrained(args, cfg, data, out: Path, manifest: RunManifest):
    if args.model:
        model = load_checkpoint(args.model)
        manifest.inputs["model"] = model.weights_digest()
        return model
    model, res = pipeline.pretrain(cfg, data)
    save_checkpoint(model, out / "pretrained.ckpt")
    manifest.add_result(out, "pretrained.ckpt", model.weights_digest())
    log.info("pretrained: SA %.4f ASR %.4f", res.sa, res.asr)
    return model


def _finish_eval(out: Path, manifest: RunManifest, result) -> None:
    result.save(out / "result.json")
    manifest.add_result(out, "result.json")
    print(f"SA {result.sa:.4f} ASR {result.asr:.4f} (n_clean={result.n_clean}, "
          f"n_attack_eligible={result.n_attack_eligible})")


def cmd_poison_make(args, cfg, out, manifest):
    data = pipeline.build_data(cfg)
    pipeline.save_data(data, out)
    manifest.datasets = data.checksums()
    for name in ("labeled", "unlabeled", "test_clean", "test_poisoned"):
        manifest.add_result(out, f"{name}.npz", getattr(data, name).checksum())
    for name in ("split.json", "poison_manifest.json", "target.txt"):
        manifest.add_result(out, name)
    manifest.poison_manifest = {"path": "poison_manifest.json", "sha256": manifest.results["poison_manifest.json"]}
    print(f"labeled {len(data.labeled)}, unlabeled {len(data.unlabeled)}, "
          f"poisoned L {len(data.poisoned['labeled'].poisoned_indices)}, "
          f"U {len(data.poisoned['unlabeled'].poisoned_indices)}")


def cmd_pretrain(args, cfg, out, manifest):
    data = _data(args, cfg, out, manifest)
    model, res = pipeline.pretrain(cfg, data)
    save_checkpoint(model, out / "model.ckpt")
    manifest.add_result(out, "model.ckpt", model.weights_digest())
    _finish_eval(out, manifest, res)


def _finish_selftrain(out, manifest, result, n_iter):
    for n in range(1, n_iter + 1):
        manifest.add_result(out, f"iter_{n}/pseudolabels.csv")
        manifest.add_result(out, f"iter_{n}/selected.csv")
        manifest.add_result(out, f"iter_{n}/model.ckpt", result.iteration_models[n - 1].weights_digest())
    manifest.add_result(out, "final/model.ckpt", result.final.weights_digest())
    manifest.add_result(out, "trace.csv")
    _finish_eval(out, manifest, pipeline.final_result(result.trace))


def cmd_selftrain(args, cfg, out, manifest):
    data = _data(args, cfg, out, manifest)
    model = _pretrained(args, cfg, data, out, manifest)
    result = pipeline.selftrain(cfg, data, model, run_dir=out)
    _finish_selftrain(out, manifest, result, cfg["selftrain.iterations"])


def cmd_ssl_selftrain(args, cfg, out, manifest):
    data = _data(args, cfg, out, manifest)
    model = _pretrained(args, cfg, data, out, manifest)
    encoder = load_encoder(args.encoder) if args.encoder else None
    if encoder is not None:
        manifest.inputs["encoder"] = file_digest(args.encoder)
    result = pipeline.ssl_selftrain(cfg, data, model, run_dir=out, encoder=encoder)
    manifest.inputs["simclr"] = simclr_config_dict(pipeline.simclr_config(cfg))
    manifest.add_result(out, "clusters.json")
    _finish_selftrain(out, manifest, result.selftrain, cfg["selftrain.iterations"])


def cmd_aug_sweep(args, cfg, out, manifest):
    data = _data(args, cfg, out, manifest)
    model = _pretrained(args, cfg, data, out, manifest)
    rows = aug_sweep(model, data.test_clean, data.test_poisoned, data.target, pipeline.sweep_entries(cfg),
                     cfg["sweep.repeats"], cfg["sweep.seed"], cfg["sweep.sa_on"], out_dir=out,
                     workers=args.workers)
    write_sweep(rows, out / "sweep.csv")
    manifest.add_result(out, "sweep.csv")
    if cfg["sweep.plot"]:
        plot_sweep(rows, out / "boxplot.png")
    print(f"{len(rows)} sweep rows -> {out / 'sweep.csv'}")


def cmd_eval(args, cfg, out, manifest):
    for p in (args.model, args.test_clean, args.test_poisoned):
        if not Path(p).exists():
            raise InputError(f"not found: {p}")
    model = load_checkpoint(args.model)
    clean, poisoned = load_dataset(args.test_clean), load_dataset(args.test_poisoned)
    manifest.inputs = {"model": model.weights_digest(), "target": args.target}
    manifest.datasets = {"test_clean": clean.checksum(), "test_poisoned": poisoned.checksum()}
    _finish_eval(out, manifest, eval_model(model, clean, poisoned, args.target))


HANDLERS = {
    "poison-make": cmd_poison_make,
    "pretrain": cmd_pretrain,
    "selftrain": cmd_selftrain,
    "ssl-selftrain": cmd_ssl_selftrain,
    "aug-sweep": cmd_aug_sweep,
    "eval": cmd_eval,
}


def run(args) -> int:
    if args.command == "report":
        tables = report(args.runs, args.out)
        print(render_text(tables))
        return 0
    cfg = resolve_config(args)
    if args.dump_config:
        cfgmod.dump(cfg, args.dump_config)
        print(f"config written to {args.dump_config}")
        return 0
    set_determinism(cfg["run.deterministic"])
    set_device(cfg["run.device"])
    out = run_dir_for(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, cfg, seeds_of(cfg))
    HANDLERS[args.command](args, cfg, out, manifest)
    path = manifest.save(out)
    log.info("manifest %s (content hash %s)", path, manifest.content_hash()[:12])
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
