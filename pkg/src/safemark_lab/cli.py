"""``safemark-lab`` command line: one subcommand per experiment, JSON/CSV reports on disk."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__, bounds, codec, convergence, oracle, synth
from . import distort as D
from .config import ConfigError, ExperimentConfig
from .editor import Editor, edit
from .trainer import eval_messages, evaluate, run_training, write_run

log = logging.getLogger("safemark_lab")


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None, default_name: str | None = None) -> None:
    """Write ``text`` to ``out`` (a file, or a directory when ``default_name`` is given) or stdout."""
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    if default_name and (path.is_dir() or out.endswith(("/", "\\"))):
        path = path / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _out_dir(args, cfg: ExperimentConfig | None, fallback: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and "out_dir" in cfg.doc:
        return Path(cfg.doc["out_dir"])
    return Path(fallback)


def _dataset(cfg: ExperimentConfig) -> np.ndarray:
    s = cfg.synth
    return synth.make_dataset(int(s["count"]), int(s["seed"]), tuple(s["size"]), int(s["channels"]), tuple(s["kinds"]))


def _load_dataset(path: str) -> np.ndarray:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    return np.stack([synth.read_ppm(root / e["file"]) for e in manifest["images"]])


def _editor(cfg: ExperimentConfig) -> Editor:
    return Editor(cfg.prompts, cfg.seed, cfg.geometry)


def manifest(cfg: ExperimentConfig) -> dict:
    """Provenance block: no timestamps or hostnames, so reruns stay byte-identical."""
    return {
        "config_sha256": cfg.sha256(),
        "versions": {
            "safemark_lab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "seeds": {
            "global": cfg.seed,
            "key": cfg.key.seed,
            "synth": cfg.synth["seed"],
            "train": cfg.train.seed,
            "eval": cfg.eval_seed,
            "convergence_family": cfg.doc["convergence"]["family_seed"],
        },
    }


# ---------------------------------------------------------------------------
# bounds


def cmd_bounds(args, cfg) -> int:
    rows: list[bounds.BoundReport] = []
    if args.paper_remark:
        rows += bounds.remark_reports()
    if args.h2 is not None:
        rows.append(bounds.report_h2(args.h2))
    if args.tau is not None:
        if args.bits is None:
            raise ValueError("--tau needs --bits")
        rows.append(bounds.report_capacity(args.tau, args.bits) if args.capacity else bounds.report_soft_mi(args.tau, args.bits))
    if args.acc is not None:
        if args.bits is None:
            raise ValueError("--acc needs --bits")
        rows.append(bounds.report_acc_mi(args.acc, args.bits))
        rows.append(bounds.report_iid(args.acc, args.bits))
    if args.mi is not None:
        if args.bits is None:
            raise ValueError("--mi needs --bits")
        rows.append(bounds.report_fano(args.mi, args.bits))
    if args.soft is not None:
        rows.append(bounds.report_calibration(args.soft))
    if not rows:
        raise ValueError("nothing to compute; try --paper-remark or --h2 P")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["bound_name", "B", "input", "value", "vacuous"])
    for r in rows:
        wr.writerow(r.row())
    _emit(buf.getvalue(), args.out, "bounds.csv")
    return 0


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args, cfg) -> int:
    seed = args.seed if args.seed is not None else 0
    report = oracle.verify(args.trials, seed, args.max_bits)
    _emit(_dump(report), args.out, "oracle.json")
    ok = not report["violations"] and report["equality_ok"]
    if not ok:
        log.error("certification failed: %d violations, equality_ok=%s", len(report["violations"]), report["equality_ok"])
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# synth


def _synth_specs(args, cfg) -> list[synth.SynthSpec]:
    """``--spec`` is a list of SynthSpec objects or a partial synth section; otherwise the config's."""
    s = cfg.synth
    if args.spec:
        doc = json.loads(Path(args.spec).read_text())
        if isinstance(doc, list):
            try:
                return [synth.SynthSpec(**d) for d in doc]
            except TypeError as exc:
                raise ValueError(f"bad synth spec entry: {exc}") from None
        unknown = set(doc) - set(s)
        if unknown:
            raise ValueError(f"unknown synth keys {sorted(unknown)}")
        s.update(doc)
    if args.count is not None:
        s["count"] = args.count
    return synth.dataset_specs(int(s["count"]), int(s["seed"]), tuple(s["size"]), int(s["channels"]), tuple(s["kinds"]))


def cmd_synth(args, cfg) -> int:
    specs = _synth_specs(args, cfg)
    out = _out_dir(args, cfg, "dataset")
    synth.write_dataset(specs, out)
    log.info("wrote %d images to %s", len(specs), out)
    return 0


# ---------------------------------------------------------------------------
# train / evaluate / distort


def _train_config(cfg: ExperimentConfig, steps: int | None):
    tc = cfg.train
    if steps is not None:
        tc = type(tc)(**{**asdict(tc), "steps": steps})
    return tc


def cmd_train(args, cfg) -> int:
    data = _load_dataset(args.dataset) if args.dataset else _dataset(cfg)
    ed = _editor(cfg)
    tc = _train_config(cfg, args.steps)
    report, theta = run_training(data, ed.prompts, ed.theta0, cfg.key, tc, cfg.eval_seed, log=log.info)
    out = _out_dir(args, cfg, "run")
    write_run(report, theta, out)
    (out / "manifest.json").write_text(_dump(manifest(cfg)))
    return 0 if report.aborted_at is None else 1


def _theta(args, ed: Editor):
    return ed.load_theta(args.theta) if args.theta else ed.trainable()


def cmd_evaluate(args, cfg) -> int:
    data = _load_dataset(args.dataset) if args.dataset else _dataset(cfg)
    ed = _editor(cfg)
    result = evaluate(_theta(args, ed), ed.theta0, cfg.key, data, ed.prompts, cfg.eval_seed)
    _emit(_dump(result), args.out, "eval.json")
    return 0


def cmd_distort(args, cfg) -> int:
    data = _load_dataset(args.dataset) if args.dataset else _dataset(cfg)
    ed = _editor(cfg)
    grid = D.load_grid(args.grid) if args.grid else cfg.grid
    report = D.wfr_heatmap(_theta(args, ed), cfg.key, data, ed.prompts, grid, cfg.eval_seed)
    _emit(report.to_csv(), args.out, "heatmap.csv")
    return 0


# ---------------------------------------------------------------------------
# convergence


def _family(args, cfg) -> list[convergence.ConvergenceInstance]:
    if args.family:
        doc = json.loads(Path(args.family).read_text())
        if isinstance(doc, list):
            return [convergence.ConvergenceInstance.from_json(d) for d in doc]
        unknown = set(doc) - {"count", "seed", "include_reference"}
        if unknown:
            raise ValueError(f"unknown family keys {sorted(unknown)}")
        fam = convergence.random_family(int(doc["count"]), int(doc.get("seed", 0)))
        return ([convergence.reference_instance()] if doc.get("include_reference", True) else []) + fam
    c = cfg.doc["convergence"]
    seed = args.seed if args.seed is not None else c["family_seed"]
    return [convergence.reference_instance(), *convergence.random_family(c["family_count"], seed)]


def cmd_converge(args, cfg) -> int:
    rows = convergence.family_rows(_family(args, cfg))
    _emit(convergence.rows_to_csv(rows), args.out, "conv.csv")
    failed = [r["instance_id"] for r in rows if not r["pass"]]
    if failed:
        log.error("budget or descent violations on instances %s", failed)
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# pipeline


def accuracy_table(result: dict) -> dict:
    """Per-prompt Original / Mani / SafeMark rows with the same keys in each row."""
    table = {}
    for label, p in result["per_prompt"].items():
        table[label] = {
            "Original": {"acc": p["original_acc"], "sem_gap_l1": None, "psnr_vs_mani": None},
            "Mani": {"acc": p["mani_acc"], "sem_gap_l1": 0.0, "psnr_vs_mani": None},
            "SafeMark": {"acc": p["safemark_acc"], "sem_gap_l1": p["sem_gap_l1"], "psnr_vs_mani": p["psnr_vs_mani"]},
        }
    return table


def run_pipeline(cfg: ExperimentConfig, out: Path, steps: int | None = None) -> dict:
    """Run every stage in order; on failure persist what exists and raise :class:`StageFailed`."""
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"manifest": manifest(cfg), "stages_completed": []}
    state: dict = {}

    def persist() -> None:
        (out / "summary.json").write_text(_dump(summary))

    def stage(name, fn):
        log.info("stage %s", name)
        try:
            fn()
        except Exception as exc:
            summary["failed_stage"] = name
            summary["error"] = str(exc)
            persist()
            raise StageFailed(name, exc) from exc
        summary["stages_completed"].append(name)

    (out / "config.json").write_text(_dump(cfg.doc))
    (out / "manifest.json").write_text(_dump(summary["manifest"]))

    def s_synth():
        state["data"] = _dataset(cfg)
        state["editor"] = _editor(cfg)
        cfg.key.save(out / "key.json")

    def s_embed():
        data = state["data"]
        w = eval_messages(cfg.key, len(data), cfg.eval_seed)
        state["x_wm"] = codec.embed(cfg.key, data, w)
        state["w"] = w

    def s_original():
        acc = codec.bit_accuracy(state["w"], codec.harden(codec.decode_soft(cfg.key, state["x_wm"])))
        summary["original_acc"] = acc

    def s_mani():
        ed = state["editor"]
        summary["mani_acc"] = {
            p.label: codec.bit_accuracy(state["w"], codec.harden(codec.decode_soft(cfg.key, edit(ed.theta0, state["x_wm"], p))))
            for p in ed.prompts
        }

    def s_train():
        ed = state["editor"]
        tc = _train_config(cfg, steps)
        report, theta = run_training(state["data"], ed.prompts, ed.theta0, cfg.key, tc, cfg.eval_seed, log=log.info)
        write_run_files(report, theta)
        if report.aborted_at is not None:
            raise RuntimeError(f"training aborted at step {report.aborted_at}")
        state["theta"], state["report"] = theta, report

    def write_run_files(report, theta):
        (out / "steps.csv").write_text(report.steps_csv())
        (out / "train.json").write_text(_dump(report.summary()))
        theta.save(out / "theta.ckpt")

    def s_evaluate():
        ed = state["editor"]
        result = evaluate(state["theta"], ed.theta0, cfg.key, state["data"], ed.prompts, cfg.eval_seed)
        (out / "eval.json").write_text(_dump(result))
        summary["table"] = accuracy_table(result)
        summary["overall"] = {k: result[k] for k in ("original_acc", "mani_acc", "safemark_acc", "sem_gap_l1", "psnr_vs_mani")}

    def s_heatmap():
        ed = state["editor"]
        report = D.wfr_heatmap(state["theta"], cfg.key, state["data"], ed.prompts, cfg.grid, cfg.eval_seed)
        (out / "heatmap.csv").write_text(report.to_csv())

    def s_phase():
        records = state["report"].records
        phase = {"steps": len(records)}
        if records:
            ps = convergence.phase_tracker(records)
            phase.update(first_inactive_step=ps.first_inactive_step, reactivation_count=ps.reactivation_count)
        else:
            phase.update(first_inactive_step=None, reactivation_count=0)
        summary["phase"] = phase

    for name, fn in [
        ("synth", s_synth),
        ("embed", s_embed),
        ("original", s_original),
        ("mani", s_mani),
        ("train", s_train),
        ("evaluate", s_evaluate),
        ("heatmap", s_heatmap),
        ("phase", s_phase),
    ]:
        stage(name, fn)
    persist()
    return summary


def cmd_pipeline(args, cfg) -> int:
    out = _out_dir(args, cfg, "run")
    try:
        run_pipeline(cfg, out, args.steps)
    except StageFailed as exc:
        log.error("%s", exc)
        return 2
    return 0


# ---------------------------------------------------------------------------
# tau sweep


def parse_taus(text: str) -> list[float]:
    taus = [float(t) for t in text.split(",") if t.strip()]
    unique = sorted(set(taus))
    if len(unique) != len(taus):
        log.warning("duplicate tau values removed: %s -> %s", taus, unique)
    return unique


SWEEP_COLUMNS = ("tau", "acc", "sem_gap_l1", "psnr", "error")


def sweep_rows(cfg: ExperimentConfig, taus: list[float], steps: int | None = None) -> list[dict]:
    """One training + evaluation per tau, in ascending order; a failing run becomes an error row."""
    data = _dataset(cfg)
    ed = _editor(cfg)
    rows = []
    for tau in taus:
        try:
            tc = _train_config(cfg.with_train(tau=tau), steps)
            report, theta = run_training(data, ed.prompts, ed.theta0, cfg.key, tc, cfg.eval_seed)
            if report.aborted_at is not None:
                raise RuntimeError(f"training aborted at step {report.aborted_at}")
            f = report.final
            rows.append({"tau": tau, "acc": f["safemark_acc"], "sem_gap_l1": f["sem_gap_l1"], "psnr": f["psnr_vs_mani"], "error": ""})
        except Exception as exc:
            log.error("tau=%g failed: %s", tau, exc)
            rows.append({"tau": tau, "acc": None, "sem_gap_l1": None, "psnr": None, "error": str(exc)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SWEEP_COLUMNS)
    for r in rows:
        wr.writerow(["" if r[c] is None else (repr(round(r[c], 12)) if isinstance(r[c], float) else r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def cmd_sweep_tau(args, cfg) -> int:
    taus = parse_taus(args.taus)
    rows = sweep_rows(cfg, taus, args.steps)
    _emit(sweep_csv(rows), args.out, "sweep.csv")
    return 0 if all(not r["error"] for r in rows) else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--quiet", action="store_true", help="only log errors")

    p = argparse.ArgumentParser(prog="safemark-lab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic PPM dataset")
    s.add_argument("--spec", help="JSON list of SynthSpec objects or {count, size, channels, kinds, seed}")
    s.add_argument("--count", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("bounds", parents=[common], help="information-theoretic bounds as CSV")
    s.add_argument("--paper-remark", action="store_true", help="B=64, mean accuracy 0.9 preset")
    s.add_argument("--h2", type=float, metavar="P", help="binary entropy of P")
    s.add_argument("--tau", type=float, help="soft-accuracy target (with --bits)")
    s.add_argument("--capacity", action="store_true", help="with --tau: capacity bound B(1 - H2(1 - tau))")
    s.add_argument("--acc", type=float, help="mean bit accuracy (with --bits)")
    s.add_argument("--mi", type=float, help="mutual information in bits for the block-error bound")
    s.add_argument("--soft", type=float, help="soft accuracy for the calibration bound")
    s.add_argument("--bits", type=int, help="payload length B")
    s.set_defaults(fn=cmd_bounds)

    s = sub.add_parser("oracle", parents=[common], help="exact-MI certification of the bounds")
    s.add_argument("action", choices=["verify"])
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--max-bits", type=int, default=3)
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("train", parents=[common], help="fine-tune the editor")
    s.add_argument("--dataset", help="directory written by `synth` (default: synthesize from config)")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="Original/Mani/SafeMark accuracies")
    s.add_argument("--theta", help="editor checkpoint (default: the reference editor)")
    s.add_argument("--dataset")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("distort", parents=[common], help="WFR heatmap under post-edit distortions")
    s.add_argument("--theta")
    s.add_argument("--grid", help="JSON list of distortion specs")
    s.add_argument("--dataset")
    s.set_defaults(fn=cmd_distort)

    s = sub.add_parser("converge", parents=[common], help="finite-step convergence checks")
    s.add_argument("--family", help="JSON list of instances or {count, seed}")
    s.set_defaults(fn=cmd_converge)

    s = sub.add_parser("sweep-tau", parents=[common], help="train once per tau")
    s.add_argument("--taus", default="0.8,0.9,1.0", help="comma-separated tau values")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_sweep_tau)

    s = sub.add_parser("pipeline", parents=[common], help="end-to-end run")
    s.add_argument("--steps", type=int, help="override training steps")
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = ExperimentConfig.load(args.config, args.seed)
        return args.fn(args, cfg)
    except (ConfigError, ValueError, OSError, synth.RasterError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
