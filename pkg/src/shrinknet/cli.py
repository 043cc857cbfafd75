"""``shrinknet`` command line: datagen, train, prune, distill, eval, bench, report.

All artifacts live in one workspace directory under fixed names:

    data/                         synthetic dataset (meta.json + f32 blobs)
    teacher.nnzm                  trained teacher (+ teacher_train.json)
    pruned_<rule>_cr<k>.nnzm      pruned teacher (+ ..._history.json)
    student_<arch>_kd.nnzm        distilled student (+ ..._train.json)
    student_<arch>_nokd.nnzm      the same recipe with kd.lambda = 0
    scores_<model>.csv            genuine/impostor pairs
    eval_<model>.json             verification report
    bench_<model>.json            timing result; bench_table.{txt,csv}
    report.json                   per-model summary
    manifest.json                 config hash, inputs and outputs of each step

Exit codes: 0 ok, 1 workspace busy, 2 config error, 3 missing or unreadable
input artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

from . import ops
from .bench import compare, format_table, time_extraction, to_csv
from .config import ConfigError, RunConfig, load_config
from .experiment import Splits, build_arch, splits_from_subjects, verify
from .netlib import ModelFormatError, cost_report, load, read_header, save
from .pruning import compression_ratio, prune_iterative
from .synthdata import generate, load_dataset, save_dataset, split_subject_independent
from .training import distill, fine_tuner, train_plain

log = logging.getLogger("shrinknet")

EXIT_OK, EXIT_BUSY, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4
COMMANDS = ("datagen", "train", "prune", "distill", "eval", "bench", "report")
TEACHER = "teacher"


class MissingArtifact(RuntimeError):
    pass


class WorkspaceBusy(RuntimeError):
    pass


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def format_cr(cr: float) -> str:
    return str(int(cr)) if float(cr).is_integer() else f"{cr:g}"


def pruned_name(rule: str, cr: float) -> str:
    return f"pruned_{rule}_cr{format_cr(cr)}"


def student_name(arch: str, kd: bool) -> str:
    """``student_<arch>_kd`` / ``student_<arch>_nokd``, without doubling an existing ``student_`` prefix."""
    base = arch if arch.startswith("student_") else f"student_{arch}"
    return f"{base}_{'kd' if kd else 'nokd'}"


# ------------------------------------------------------------------ workspace


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in (p, *p.parents):
            raise ConfigError(f"artifact {name!r} resolves outside the workspace")
        return p

    def require(self, name: str, hint: str = "") -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(f"missing input artifact {p}" + (f" (run `shrinknet {hint}` first)" if hint else ""))
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def model_names(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.nnzm"))

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise WorkspaceBusy(f"workspace {self.root} is locked ({lock}); remove the file if no other run is active") from exc
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock.unlink(missing_ok=True)

    def digest(self, p: Path) -> str:
        h = hashlib.sha256()
        if p.is_dir():
            for f in sorted(p.iterdir()):
                h.update(f.name.encode())
                h.update(hashlib.sha256(f.read_bytes()).digest())
        else:
            h.update(p.read_bytes())
        return h.hexdigest()

    def record(self, key: str, command: str, cfg: RunConfig, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
        manifest_path = self.root / "manifest.json"
        manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
        rel = lambda p: p.relative_to(self.root.resolve()).as_posix()  # noqa: E731
        manifest[key] = {
            "command": command,
            "config_hash": cfg.digest(),
            "inputs": {rel(p): self.digest(p) for p in inputs},
            "outputs": {rel(p): self.digest(p) for p in outputs},
        }
        manifest_path.write_text(dump_json(manifest), encoding="utf-8")


# ------------------------------------------------------------------ helpers


def _load_splits(cfg: RunConfig, ws: Workspace) -> tuple[Splits, Path]:
    data = ws.require("data/meta.json", "datagen").parent
    ds, split = load_dataset(data)
    if ds.spec != cfg.dataset:
        log.warning("dataset on disk was generated with a different dataset config; using the stored data")
    return splits_from_subjects(ds, split["train_subjects"], cfg.seed), data


def _load_model(ws: Workspace, name: str, hint: str):
    path = ws.require(f"{name}.nnzm", hint)
    return load(path), path


def _selected_models(cfg: RunConfig, ws: Workspace) -> list[str]:
    names = [m[:-5] if m.endswith(".nnzm") else m for m in cfg.eval.models] or ws.model_names()
    if not names:
        raise MissingArtifact(f"no model files in {ws.root} (run `shrinknet train` first)")
    for n in names:
        ws.require(f"{n}.nnzm", "train")
    # teacher first so bench speedups are relative to it
    return sorted(names, key=lambda n: (n != TEACHER, n))


# ------------------------------------------------------------------ commands


def cmd_datagen(cfg: RunConfig, ws: Workspace):
    ds = generate(cfg.dataset)
    train, eval_ = split_subject_independent(ds, cfg.eval.train_fraction, cfg.seed)
    data = ws.path("data")
    if data.exists():
        for f in data.glob("*.f32"):
            f.unlink()
    save_dataset(ds, data, split={"train_subjects": train.subjects, "eval_subjects": eval_.subjects})
    log.info("wrote %d samples (%d train / %d eval subjects) to %s", len(ds), len(train.subjects), len(eval_.subjects), data)
    return "datagen", [], [data]


def cmd_train(cfg: RunConfig, ws: Workspace):
    splits, data = _load_splits(cfg, ws)
    model = build_arch(cfg.arch.teacher, splits, splits.train.images.shape[1:], cfg.arch.embedding_dim, cfg.seed)
    model, report = train_plain(model, splits.fit, splits.val, cfg.train)
    out = ws.path(f"{TEACHER}.nnzm")
    save(model, out, "dense")
    rep = ws.write_text(f"{TEACHER}_train.json", dump_json(report.to_dict()))
    log.info("teacher: %d epochs, best val acc %.4f -> %s", report.epochs, report.best_val_acc or 0.0, out)
    return f"train:{TEACHER}", [data], [out, rep]


def cmd_prune(cfg: RunConfig, ws: Workspace):
    splits, data = _load_splits(cfg, ws)
    teacher, src = _load_model(ws, TEACHER, "train")
    ft = fine_tuner(splits.fit, cfg.finetune.to_train_config(cfg.seed, cfg.prune.fine_tune_epochs))
    model, history = prune_iterative(teacher, cfg.prune, splits.fit, fine_tune=ft)
    name = pruned_name(cfg.prune.rule.value, cfg.prune.target_cr)
    out = ws.path(f"{name}.nnzm")
    save(model, out, cfg.paths.prune_storage)
    cr = compression_ratio(model)
    hist = history.to_dict()
    hist["cr_params"], hist["cr_all"] = cr.cr_params, cr.cr_all
    hist_path = ws.write_text(f"{name}_history.json", dump_json(hist))
    log.info("%s: cr_params %.3f -> %s", name, cr.cr_params, out)
    return f"prune:{name}", [data, src], [out, hist_path]


def cmd_distill(cfg: RunConfig, ws: Workspace):
    splits, data = _load_splits(cfg, ws)
    teacher, src = _load_model(ws, TEACHER, "train")
    student = build_arch(cfg.arch.student, splits, splits.train.images.shape[1:], cfg.arch.embedding_dim, cfg.seed)
    student, report = distill(teacher, student, splits.fit, splits.val, cfg.kd)
    name = student_name(cfg.arch.student, cfg.kd.lam > 0)
    out = ws.path(f"{name}.nnzm")
    save(student, out, "dense")
    rep = ws.write_text(f"{name}_train.json", dump_json(report.to_dict()))
    log.info("%s: %d epochs, best val acc %.4f -> %s", name, report.epochs, report.best_val_acc or 0.0, out)
    return f"distill:{name}", [data, src], [out, rep]


def cmd_eval(cfg: RunConfig, ws: Workspace):
    splits, data = _load_splits(cfg, ws)
    inputs, outputs = [data], []
    for name in _selected_models(cfg, ws):
        model, src = _load_model(ws, name, "train")
        scores, report = verify(model, splits.eval, splits.train_subjects, cfg.eval.fmr_targets)
        outputs.append(ws.write_text(f"scores_{name}.csv", scores.to_csv()))
        outputs.append(ws.write_text(f"eval_{name}.json", dump_json(report.to_dict())))
        inputs.append(src)
        log.info("%s: EER %.4f, AUC %.4f", name, report.eer, report.auc)
    return "eval", inputs, outputs


def cmd_bench(cfg: RunConfig, ws: Workspace):
    splits, data = _load_splits(cfg, ws)
    batch = splits.eval.images[: cfg.bench.batch_size]
    results, inputs, outputs = [], [data], []
    for name in _selected_models(cfg, ws):
        model, src = _load_model(ws, name, "train")
        storage = read_header(src)[1].get("storage", "dense")
        r = time_extraction(model, batch, cfg.bench.warmup, cfg.bench.reps, model_name=name, storage=storage)
        results.append(r)
        inputs.append(src)
        outputs.append(ws.write_text(f"bench_{name}.json", dump_json(r.to_dict())))
        log.info("%s: mean %.3f ms over %d reps", name, r.mean_ms, r.reps)
    if len(results) >= 2:
        rows = compare(results)
        outputs.append(ws.write_text("bench_table.txt", format_table(rows)))
        outputs.append(ws.write_text("bench_table.csv", to_csv(rows)))
        log.info("\n%s", format_table(rows).rstrip())
    return "bench", inputs, outputs


def cmd_report(cfg: RunConfig, ws: Workspace):
    names = [n for n in _selected_models(cfg, ws) if ws.path(f"eval_{n}.json").exists()]
    if not names:
        raise MissingArtifact(f"no evaluation results in {ws.root} (run `shrinknet eval` first)")
    inputs, models = [], {}
    for name in names:
        model, src = _load_model(ws, name, "train")
        ev_path = ws.path(f"eval_{name}.json")
        ev = json.loads(ev_path.read_text(encoding="utf-8"))
        cost = cost_report(model)
        bench_path = ws.path(f"bench_{name}.json")
        mean_et = json.loads(bench_path.read_text(encoding="utf-8"))["mean_ms"] if bench_path.exists() else None
        models[name] = {
            "eer": ev["eer"],
            "gmr_at": ev["gmr_at"],
            "auc": ev["auc"],
            "cr_params": cost.cr_params,
            "total_madds": cost.total_madds,
            "total_params": cost.total_params,
            "nonzero_params": cost.nonzero_params,
            "file_bytes": src.stat().st_size,
            "mean_et_ms": mean_et,
        }
        inputs += [src, ev_path] + ([bench_path] if bench_path.exists() else [])
    out = ws.write_text("report.json", dump_json({"models": models}))
    for name, row in models.items():
        log.info("%-40s EER %.4f  CR %.2f  MAdds %d", name, row["eer"], row["cr_params"], row["total_madds"])
    return "report", inputs, [out]


HANDLERS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "prune": cmd_prune,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used for missing fields)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, e.g. prune.target_cr=8 (repeatable)")
    common.add_argument("--workspace", help="artifact directory (overrides paths.workspace)")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    parser = argparse.ArgumentParser(prog="shrinknet", description="Train, compress and evaluate embedding networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "datagen": "generate the synthetic dataset and subject split",
        "train": "train the teacher",
        "prune": "iteratively prune the teacher",
        "distill": "distill a student from the teacher (kd.lambda=0 trains it without the teacher)",
        "eval": "verification scores and metrics for each model",
        "bench": "time feature extraction for each model",
        "report": "merge metrics, cost and timing into report.json",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    sub.add_parser("show-config", parents=[common], help="print the effective config as JSON")
    return parser


def run(command: str, config: Optional[str] = None, overrides: Sequence[str] = (), workspace: Optional[str] = None) -> int:
    """Run one subcommand and return its exit code."""
    try:
        cfg = load_config(config, overrides, os.environ.get("SHRINKNET_SEED"), workspace)
        if command == "show-config":
            sys.stdout.write(cfg.to_json())
            return EXIT_OK
        ws = Workspace(cfg.paths.workspace)
        with ws.lock():
            key, inputs, outputs = HANDLERS[command](cfg, ws)
            ws.record(key, command, cfg, inputs, outputs)
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingArtifact, ModelFormatError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (FloatingPointError, ops.NonFiniteError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except WorkspaceBusy as exc:
        log.error("%s", exc)
        return EXIT_BUSY


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True)
    logging.getLogger("shrinknet.training").setLevel(logging.WARNING if args.quiet else logging.INFO)
    return run(args.command, args.config, args.overrides, args.workspace)


if __name__ == "__main__":
    sys.exit(main())
