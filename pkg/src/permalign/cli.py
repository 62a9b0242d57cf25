"""``permalign <command> --config FILE [--jobs N] [--out DIR]``.

Outputs are byte-deterministic for identical manifests; wall-clock
timestamps go only to the ``run.log`` sidecar. Exit codes: 0 success,
2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io
from .align import match
from .connectivity import barrier_curve, evaluate
from .experiments import (
    COMMAND_KEYS,
    METRICS,
    Manifest,
    ManifestError,
    _data,
    data_fingerprint,
    file_sha256,
    run_replicate,
    summarize,
    to_csv,
)
from .model import InvalidPermutationError, ShapeError, SpecError, apply_permutation, build_mlp_spec
from .train import (
    ConfigError,
    checkpoint_name,
    format_kv,
    load_checkpoint,
    parse_kv,
    save_checkpoint,
    train,
)

log = logging.getLogger("permalign")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
VALIDATION_ERRORS = (
    ConfigError, io.FormatError, ShapeError, SpecError, InvalidPermutationError,
    FileNotFoundError, KeyError, ValueError,
)


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def _provenance(m: Manifest, config_path: Path, extra_inputs: dict[str, Path]) -> dict:
    inputs = {"config": file_sha256(config_path)}
    inputs.update({k: file_sha256(p) for k, p in sorted(extra_inputs.items())})
    out = {"command": m.command, "config": m.resolved(), "inputs": inputs}
    if m.command not in ("match", "barrier") or m.values["method"] == "activation":
        bundle = _data(m.values["data"])
        out["data"] = {"source": bundle.source, "sha256": data_fingerprint(bundle)}
    return out


def _eval_splits(m: Manifest) -> dict:
    bundle = _data(m.values["data"])
    limit = int(m.values["eval_limit"])
    return {"train": bundle.train.head(limit), "test": bundle.test.head(limit)}


def cmd_train(m: Manifest, out: Path, config_path: Path) -> dict:
    cfg = m.train_config()
    bundle = _data(m.values["data"])
    run = train(cfg, bundle.train)
    for ck in run:
        save_checkpoint(out / checkpoint_name(ck.epoch), ck)
    _write(out / "config.txt", format_kv(cfg.to_flat()))
    final = run[-1]
    metrics = {split: dataclasses.asdict(evaluate(final.params, ds)) for split, ds in _eval_splits(m).items()}
    log.info("trained %d epochs, test error %.4f", cfg.epochs, metrics["test"]["error_rate"])
    return {"fingerprint": cfg.fingerprint(), "final_epoch": final.epoch,
            "epochs_saved": [c.epoch for c in run], "final": metrics}


def cmd_match(m: Manifest, out: Path, config_path: Path) -> dict:
    a = load_checkpoint(m.path("ckpt_a")).params
    b = load_checkpoint(m.path("ckpt_b")).params
    spec = build_mlp_spec(a.arch)
    data = _data(m.values["data"]).train if m.values["method"] == "activation" else None
    report = match(a, b, m.values["method"], data=data, spec=spec,
                   max_sweeps=int(m.values["max_sweeps"]))
    io.save_permutation(out / "perm.txt", report.permutation, spec)
    _write(out / "report.json", io.dumps_json(report.to_dict()) + "\n")
    return {"report": report.to_dict()}


def cmd_barrier(m: Manifest, out: Path, config_path: Path) -> dict:
    a = load_checkpoint(m.path("ckpt_a")).params
    b = load_checkpoint(m.path("ckpt_b")).params
    if m.values["perm"]:
        spec = build_mlp_spec(b.arch)
        b = apply_permutation(b, spec, io.load_permutation(m.path("perm"), spec))
    curve = barrier_curve(a, b, _eval_splits(m), int(m.values["n_alpha"]))
    _write(out / "barrier.csv", curve.to_csv())
    return {"barriers": curve.summary()}


SINGLE = {"train": cmd_train, "match": cmd_match, "barrier": cmd_barrier}


def _run_jobs(m: Manifest, jobs: int) -> list[tuple[list[dict], dict[str, bytes]]]:
    reps = range(m.replicates)
    if jobs <= 1 or m.replicates == 1:
        return [run_replicate(m, r) for r in reps]
    with ProcessPoolExecutor(max_workers=min(jobs, m.replicates)) as pool:
        return list(pool.map(run_replicate, [m] * m.replicates, reps))


def cmd_experiment(m: Manifest, out: Path, jobs: int) -> dict:
    rows, artifacts = [], {}
    for r_rows, r_art in _run_jobs(m, jobs):
        rows += r_rows
        artifacts.update(r_art)
    for rel, data in sorted(artifacts.items()):
        _write(out / rel, data)
    summary = summarize(rows, METRICS[m.command])
    _write(out / "results.csv", to_csv(rows))
    _write(out / "summary.csv", to_csv(summary))
    log.info("%s: %d rows over %d replicates", m.command, len(rows), m.replicates)
    return {"summary": summary}


def _input_paths(m: Manifest) -> dict[str, Path]:
    out = {}
    for key in ("ckpt_a", "ckpt_b", "perm"):
        if m.values.get(key):
            out[key] = m.path(key)
    for key in ("run_a", "run_b"):
        if m.values.get(key):
            for f in sorted(m.path(key).glob("ckpt_epoch*.pmlc")):
                out[f"{key}/{f.name}"] = f
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="permalign", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMAND_KEYS))
    p.add_argument("--config", required=True, type=Path, help="key=value manifest")
    p.add_argument("--jobs", type=int, default=1, help="replicates run in parallel")
    p.add_argument("--out", type=Path, default=None, help="output directory (default runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out or Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.jobs < 1:
            raise ManifestError("--jobs must be >= 1")
        kv = parse_kv(args.config.read_text(encoding="utf-8"))
        m = Manifest.build(args.command, kv, base_dir=args.config.parent)
        log.info("start %s config=%s", m.command, args.config)
        if m.command in SINGLE:
            body = SINGLE[m.command](m, out, args.config)
        else:
            body = cmd_experiment(m, out, args.jobs)
        summary = {**_provenance(m, args.config, _input_paths(m)), **body}
        _write(out / "summary.json", io.dumps_json(summary) + "\n")
        log.info("done %s", m.command)
        return EXIT_OK
    except FloatingPointError as exc:  # includes DivergedTrainingError
        log.error("numerical failure: %s", exc)
        print(f"permalign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except VALIDATION_ERRORS as exc:
        log.error("validation error: %s", exc)
        print(f"permalign: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    finally:
        log.removeHandler(handler)
        handler.close()


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
