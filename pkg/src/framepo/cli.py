"""Command-line entry point.

    framepo gen     --T 128 --n 100 --seed 7 --out d.jsonl
    framepo filter  --in d.jsonl --out kept.jsonl --tau 0.21 --report r.json
    framepo train   --data d.jsonl --total-steps 2000 --out-dir runs/a
    framepo analyze --checkpoint runs/a/final --data d.jsonl --out-dir runs/a
    framepo niah    --checkpoint runs/a/final --out-dir runs/a --plot-data
    framepo bins    --checkpoint runs/a/final --data held.jsonl --out-dir runs/a

Every command accepts ``--config file.toml`` (or a previous
resolved-config.json); flags override the file. Exit codes: 0 success,
1 invalid usage or input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from . import analysis, filterpipe
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build, load_config_file, section_fields
from .policy import PolicyDims, init_params
from .rewardsvc import ENDPOINT_ENV, RemoteScorer, RewardServiceError, ScoreClient
from .synthenv import OracleScorer, gen_dataset, read_jsonl, write_jsonl
from .trainer import JsonlSink, TrainingError, train

log = logging.getLogger("framepo")

COMMANDS = ("gen", "filter", "train", "analyze", "niah", "bins")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_type(f):
    default = f.default if f.default is not MISSING else f.default_factory()
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, list):
        elem = type(default[0]) if default else float
        return lambda s: [elem(x) for x in s.split(",") if x]
    if isinstance(default, (int, float, str)):
        return type(default)
    return str


def _add_section(p: argparse.ArgumentParser, section: str, skip=()):
    g = p.add_argument_group(section)
    for f in section_fields(section):
        if f.name in skip:
            continue
        g.add_argument(_flag(f.name), dest=f"{section}.{f.name}", type=_field_type(f),
                       default=None, metavar=f.name.upper())


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="framepo", description="Frame-subset policy optimization lab.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", default=None, help="TOML or JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out-dir", dest="out_dir", default=None)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen", help="write a synthetic episode dataset")
    common(p)
    p.add_argument("--n", dest="io.n", type=int, default=None, help="number of episodes")
    p.add_argument("--out", dest="io.out", default=None)
    _add_section(p, "env")

    p = sub.add_parser("filter", help="reward-variance filtering")
    common(p)
    p.add_argument("--in", dest="io.in", default=None)
    p.add_argument("--out", dest="io.out", default=None)
    p.add_argument("--report", dest="io.report", default=None)
    p.add_argument("--tau", dest="analysis.tau", type=float, default=None)
    p.add_argument("--k", dest="analysis.k", type=int, default=None)
    p.add_argument("--endpoint", dest="io.endpoint", default=None)
    _add_section(p, "oracle")

    p = sub.add_parser("train", help="train the selection policy")
    common(p)
    p.add_argument("--data", dest="io.data", default=None, help="episode JSONL (default: generate)")
    p.add_argument("--n", dest="io.n", type=int, default=None, help="episodes to generate without --data")
    p.add_argument("--steps", dest="train.total_steps", type=int, default=None)
    p.add_argument("--endpoint", dest="io.endpoint", default=None)
    _add_section(p, "train", skip=("seed", "workers"))
    _add_section(p, "oracle")
    _add_section(p, "env")

    for name, helptext in (("analyze", "selection PDFs and pairwise diversity"),
                           ("niah", "needle-in-a-haystack sweep"),
                           ("bins", "likelihood-bin accuracy")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", dest="io.checkpoint", default=None,
                       help="policy checkpoint stem (default: untrained init)")
        p.add_argument("--data", dest="io.data", default=None)
        p.add_argument("--n", dest="io.n", type=int, default=None)
        p.add_argument("--plot-data", dest="io.plot_data", action="store_const", const=True, default=None)
        _add_section(p, "analysis", skip=("tau", "k"))
        _add_section(p, "oracle")
        _add_section(p, "env")
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    out: dict = {}
    for key, val in vars(ns).items():
        if val is None or key in ("config", "command", "verbose"):
            continue
        if "." in key:
            section, name = key.split(".", 1)
            out.setdefault(section, {})[name] = val
        else:
            out[key] = val
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.outputs: list = []

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out_dir / p

    def record(self, path) -> None:
        self.outputs.append(Path(path))

    def write_manifest(self) -> None:
        entries = []
        for p in self.outputs:
            try:
                rel = str(p.resolve().relative_to(self.out_dir.resolve()))
            except ValueError:
                rel = str(p)
            entries.append({"path": rel, "bytes": p.stat().st_size, "sha256": _sha256(p)})
        manifest = self.out_dir / "manifest.json"
        manifest.write_text(json.dumps({"command": self.cfg.command, "outputs": entries}, indent=1) + "\n")


def _scorer(cfg: RunConfig):
    endpoint = cfg.io.get("endpoint") or os.environ.get(ENDPOINT_ENV)
    if endpoint:
        return RemoteScorer(ScoreClient(endpoint, max_inflight=max(cfg.workers, 1)))
    return OracleScorer(cfg.oracle)


def _episodes(cfg: RunConfig, default_n: int):
    data = cfg.io.get("data")
    if data:
        return read_jsonl(data)
    return gen_dataset(cfg.env, int(cfg.io.get("n", default_n)), seed=cfg.seed)


def _policy(cfg: RunConfig, episodes):
    ckpt = cfg.io.get("checkpoint")
    if ckpt:
        return load_checkpoint(ckpt)
    ep = episodes[0] if episodes else None
    d_in = ep.d_in if ep is not None else cfg.env.d_in
    d_q = ep.query.size if ep is not None else cfg.env.d_q
    dims = PolicyDims(d_in=d_in, d_q=d_q, d_e=cfg.train.d_e, d_model=cfg.train.d_model, d_g=cfg.train.d_g)
    return init_params(dims, cfg.seed)


def cmd_gen(run: _Run) -> None:
    cfg = run.cfg
    out = cfg.io.get("out")
    if not out:
        raise ValueError("gen needs --out")
    episodes = gen_dataset(cfg.env, int(cfg.io.get("n", 100)), seed=cfg.seed)
    write_jsonl(out, episodes)
    run.record(out)


def cmd_filter(run: _Run) -> None:
    cfg = run.cfg
    src, out = cfg.io.get("in"), cfg.io.get("out")
    if not src or not out:
        raise ValueError("filter needs --in and --out")
    episodes = read_jsonl(src)
    kept, report = filterpipe.score_and_filter(episodes, _scorer(cfg), tau=cfg.analysis.tau, k=cfg.analysis.k,
                                               seed=cfg.seed, workers=cfg.workers)
    write_jsonl(out, kept)
    run.record(out)
    report_path = cfg.io.get("report") or str(run.path("reports/filter-report.json"))
    Path(report_path).parent.mkdir(parents=True, exist_ok=True)
    report.to_json(report_path)
    run.record(report_path)
    log.info("retained %d/%d episodes (tau=%g)", len(kept), len(episodes), cfg.analysis.tau)


def cmd_train(run: _Run) -> None:
    cfg = run.cfg
    episodes = _episodes(cfg, default_n=512)
    ckpt_dir = run.path("checkpoints")
    metrics = run.path("metrics.jsonl")
    with JsonlSink(metrics) as sink:
        result = train(cfg.train, episodes, sink=sink, scorer=_scorer(cfg), checkpoint_dir=ckpt_dir)
    run.record(metrics)
    for stem in result.checkpoints:
        run.record(Path(stem).with_suffix(".json"))
        run.record(Path(stem).with_suffix(".bin"))
    final = ckpt_dir / "final"
    j, b = save_checkpoint(result.params, final, dtype=cfg.train.checkpoint_dtype,
                           meta={"step": cfg.train.total_steps})
    run.record(j)
    run.record(b)


def cmd_analyze(run: _Run) -> None:
    cfg = run.cfg
    a = cfg.analysis
    episodes = _episodes(cfg, default_n=16)
    params = _policy(cfg, episodes)
    pdfs = [analysis.estimate_selection_pdf(params, ep, min(a.n_select, ep.T), a.n_runs, cfg.seed)
            for ep in episodes]
    reports = run.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    pdf_csv = reports / "selection-pdfs.csv"
    with open(pdf_csv, "w", encoding="utf-8") as fh:
        fh.write("episode_id,frame,p\n")
        for pdf in pdfs:
            for t, v in enumerate(pdf.p):
                fh.write(f"{pdf.episode_id},{t},{v!r}\n")
    run.record(pdf_csv)
    summary = {"n_episodes": len(pdfs), "kl_smoothing": a.smoothing, "units": "nats"}
    if len(pdfs) >= 2:
        summary.update(analysis.pairwise_diversity([p.p for p in pdfs], a.smoothing))
    div = reports / "diversity.json"
    div.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.record(div)


def cmd_niah(run: _Run) -> None:
    cfg = run.cfg
    a = cfg.analysis
    params = _policy(cfg, [])
    factory = analysis.needle_episode_factory(cfg.env, seed=cfg.seed)
    grid = analysis.vniah_sweep(params, factory, a.frame_counts, a.positions, a.n_select, a.n_runs, cfg.seed)
    uni = analysis.uniform_niah_grid(a.frame_counts, a.positions)
    reports = run.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    for name, g, value in (("niah.csv", grid, "needle_mass"), ("niah-uniform.csv", uni, "needle_mass")):
        g.to_csv(reports / name, value)
        run.record(reports / name)
    ratio = analysis.NiahGrid(grid.frame_counts, grid.positions, grid.ratio_to(uni))
    ratio.to_csv(reports / "niah-ratio.csv", "ratio_to_uniform")
    run.record(reports / "niah-ratio.csv")
    if cfg.io.get("plot_data"):
        dat = reports / "niah.dat"
        with open(dat, "w", encoding="utf-8") as fh:
            fh.write("# T position needle_mass uniform_mass ratio\n")
            for i, pos in enumerate(grid.positions):
                for j, T in enumerate(grid.frame_counts):
                    fh.write(f"{T} {pos!r} {grid.cells[i, j]!r} {uni.cells[i, j]!r} {ratio.cells[i, j]!r}\n")
                fh.write("\n")
        run.record(dat)


def cmd_bins(run: _Run) -> None:
    cfg = run.cfg
    a = cfg.analysis
    episodes = _episodes(cfg, default_n=200)
    params = _policy(cfg, episodes)
    table = analysis.likelihood_bins_eval(params, episodes, _scorer(cfg), ks=a.ks, n_select=a.n_select,
                                          n_runs=a.n_runs, n_subsets=a.n_subsets, seed=cfg.seed)
    reports = run.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    table.to_csv(reports / "bins.csv")
    run.record(reports / "bins.csv")
    if cfg.io.get("plot_data"):
        dat = reports / "bins.dat"
        with open(dat, "w", encoding="utf-8") as fh:
            fh.write("# k over_accuracy under_accuracy baseline\n")
            for k in a.ks:
                fh.write(f"{k} {table.accuracy(k, 'over')!r} {table.accuracy(k, 'under')!r} {table.baseline!r}\n")
        run.record(dat)


HANDLERS = {"gen": cmd_gen, "filter": cmd_filter, "train": cmd_train,
            "analyze": cmd_analyze, "niah": cmd_niah, "bins": cmd_bins}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = load_config_file(ns.config) if ns.config else {}
        overrides = _overrides(ns)
        if "out_dir" not in overrides and "out_dir" not in file_values:
            out = overrides.get("io", {}).get("out")
            overrides["out_dir"] = str(Path(out).parent) if out else f"runs/{ns.command}"
        cfg = build(ns.command, file_values, overrides)
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write(out_dir / "resolved-config.json")
        r = _Run(cfg)
    except (ValueError, TypeError, OSError) as exc:
        print(f"framepo {ns.command}: invalid configuration: {exc}", file=sys.stderr)
        return 1
    try:
        HANDLERS[ns.command](r)
    except (ValueError, FileNotFoundError) as exc:
        print(f"framepo {ns.command}: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, RewardServiceError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"framepo {ns.command}: failed: {exc}", file=sys.stderr)
        return 2
    r.write_manifest()
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
