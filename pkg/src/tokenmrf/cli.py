"""Command-line entry point: ``markovgen <subcommand> --config run.json``.

Every artifact lands in the run's output directory and carries the
validated config as an echo. Inputs default to the files an earlier
subcommand would have written there; the path flags override them.
"""

from __future__ import annotations

import argparse
import colorsys
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError

from . import mgtf
from .types import GridGeometry, TokenGrid, ValidationError, VocabSpec, cosine_schedule

log = logging.getLogger("tokenmrf")

FORMAT_VERSION = 1
LOG_ENV = "MARKOVGEN_LOG"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSection(_Section):
    kind: Literal["checkerboard", "stripes", "blobs", "gt_mrf"]
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    vocab: int = Field(gt=0, le=65536)
    count: int = Field(gt=0)
    noise_rate: float = Field(0.0, ge=0, lt=1)
    condition: int | None = Field(None, ge=0)
    band: int = Field(2, gt=0)
    regions: tuple[int, int] = (3, 8)
    gibbs_burn_in: int = Field(20, ge=0)
    mrf_path: str | None = None


class TeacherSection(_Section):
    channels: int = Field(256, gt=0)
    layers: int = Field(8, gt=0)
    condition_count: int = Field(4, gt=0)
    steps: int = Field(1500, ge=0)
    batch_size: int = Field(32, gt=0)
    learning_rate: float = Field(2e-3, gt=0)


class MrfSection(_Section):
    pretrain_steps: int = Field(2000, ge=0)
    distill_steps: int = Field(1500, ge=0)
    distill_traces: int = Field(500, gt=0)
    trace_temperature: float = Field(1.0, ge=0)
    batch_size: int = Field(8, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    mf_iterations: int = Field(5, ge=0)
    mask_fraction: float = Field(0.20, gt=0, le=1)
    kappa: float = Field(10.0, ge=0)


class ScheduleSection(_Section):
    total_steps: int = Field(8, gt=0)
    cut_step: int = Field(5, gt=0)
    temperature: float = Field(0.0, ge=0)


class BenchSection(_Section):
    decodes: int = Field(20, gt=0)
    repetitions: int = Field(3, ge=3)
    variants: list[Literal["full", "early-exit", "markovgen"]] = ["full", "early-exit", "markovgen"]
    temperature: float | None = Field(None, ge=0)


class RunConfig(_Section):
    corpus: CorpusSection
    teacher: TeacherSection = TeacherSection()
    mrf: MrfSection = MrfSection()
    schedule: ScheduleSection = ScheduleSection()
    bench: BenchSection = BenchSection()
    output_dir: str
    seed: int = Field(ge=0, lt=2**64)

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.corpus.height, self.corpus.width)

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.corpus.vocab)

    def train_config(self, steps: int, seed: int, mf_iterations: int | None = None):
        from .train import TrainConfig

        m = self.mrf
        return TrainConfig(
            learning_rate=m.learning_rate,
            adam_beta1=m.adam_beta1,
            adam_beta2=m.adam_beta2,
            adam_epsilon=m.adam_epsilon,
            batch_size=m.batch_size,
            num_iterations_mf=m.mf_iterations if mf_iterations is None else mf_iterations,
            mask_fraction=m.mask_fraction,
            unary_strength_kappa=m.kappa,
            steps=steps,
            seed=seed,
        )


class ConfigError(Exception):
    pass


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(raw)
    except PydanticError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None


def palette(vocab_size: int, seed: int = 0) -> np.ndarray:
    """(V, 3) uint8 colours: evenly spaced hues in a seeded random order, alternating brightness."""
    hues = np.random.default_rng(seed).permutation(vocab_size) / vocab_size
    rgb = [colorsys.hsv_to_rgb(h, 0.7, 0.95 if i % 2 == 0 else 0.7) for i, h in enumerate(hues)]
    return (np.array(rgb) * 255).round().astype(np.uint8)


def render(grid: TokenGrid, path, scale: int = 8, seed: int = 0, png: bool = False) -> list[Path]:
    from PIL import Image

    img = palette(grid.vocab.size_v, seed)[grid.as_2d()]
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    out = [Path(path).with_suffix(".ppm")]
    Image.fromarray(img).save(out[0], format="PPM")
    if png:
        out.append(Path(path).with_suffix(".png"))
        Image.fromarray(img).save(out[1], format="PNG")
    return out


def _artifact_meta(cfg: RunConfig, **extra) -> dict:
    return {"format_version": FORMAT_VERSION, "config": cfg.echo(), **extra}


def _schedule(cfg: RunConfig, k: int | None = None):
    return cosine_schedule(cfg.geometry.n, cfg.schedule.total_steps, cfg.schedule.cut_step if k is None else k)


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _input(cfg: RunConfig, given, default: str) -> Path:
    path = Path(given) if given else Path(cfg.output_dir) / default
    if not path.exists():
        raise ConfigError(f"input file not found: {path}")
    return path


def _read_corpus(cfg: RunConfig, args):
    from .datagen import read_corpus

    corpus = read_corpus(_input(cfg, args.corpus, "corpus.mgtf"))
    g = corpus[0][0]
    if g.geometry != cfg.geometry or g.vocab != cfg.vocab:
        raise ValidationError("dimension mismatch between corpus file and config")
    return corpus


def _read_teacher(cfg: RunConfig, args):
    from .teacher import load_teacher

    model = load_teacher(_input(cfg, args.teacher, "teacher.mgtf"))
    if model.geometry != cfg.geometry or model.vocab != cfg.vocab:
        raise ValidationError("dimension mismatch between teacher file and config")
    return model


def _read_mrf(cfg: RunConfig, given, default: str):
    from .train import load_params

    params = load_params(_input(cfg, given, default))
    if params.geometry != cfg.geometry or params.vocab != cfg.vocab:
        raise ValidationError("dimension mismatch between MRF file and config")
    return params


def _condition(cfg: RunConfig) -> int:
    from .datagen import DEFAULT_CONDITION

    c = cfg.corpus
    return DEFAULT_CONDITION[c.kind] if c.condition is None else c.condition


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    from .datagen import CorpusSpec, generate, write_corpus
    from .train import load_params

    c = cfg.corpus
    mrf = load_params(c.mrf_path) if c.mrf_path else None
    spec = CorpusSpec(
        c.kind, cfg.geometry, cfg.vocab, c.count, c.noise_rate, cfg.seed, c.condition, c.band, c.regions,
        c.gibbs_burn_in, mrf,
    )
    corpus = generate(spec)
    path = _out(cfg, "corpus.mgtf")
    write_corpus(path, corpus, echo={**spec.echo(), "config": cfg.echo()}, meta=_artifact_meta(cfg))
    log.info("wrote %d grids to %s", len(corpus), path)
    return 0


def cmd_train_teacher(cfg: RunConfig, args) -> int:
    from .teacher import TeacherConfig, save_teacher, train_teacher

    corpus = _read_corpus(cfg, args)
    t = cfg.teacher
    tcfg = TeacherConfig(t.channels, t.layers, t.condition_count, t.steps, t.batch_size, t.learning_rate, cfg.seed)
    model = train_teacher([g for g, _ in corpus], [c for _, c in corpus], tcfg)
    path = _out(cfg, "teacher.mgtf")
    save_teacher(path, model, _artifact_meta(cfg))
    log.info("teacher with %d parameters written to %s", model.num_parameters(), path)
    return 0


def cmd_pretrain_mrf(cfg: RunConfig, args) -> int:
    from .train import save_params, train

    corpus = _read_corpus(cfg, args)
    tcfg = cfg.train_config(cfg.mrf.pretrain_steps, cfg.seed, args.mf_iters)
    params, metrics = train([g for g, _ in corpus], "pretrain", tcfg)
    metrics.write(_out(cfg, "metrics_pretrain.tsv"), append=False)
    save_params(_out(cfg, "mrf_pretrained.mgtf"), params, _artifact_meta(cfg, stage="pretrain"))
    return 0


def cmd_distill_mrf(cfg: RunConfig, args) -> int:
    from .teacher import build_distill_set
    from .train import save_params, train

    corpus = _read_corpus(cfg, args)
    teacher = _read_teacher(cfg, args)
    init = _read_mrf(cfg, args.pretrained, "mrf_pretrained.mgtf")
    conds = [corpus[i % len(corpus)][1] for i in range(cfg.mrf.distill_traces)]
    tcfg = cfg.train_config(cfg.mrf.distill_steps, cfg.seed, args.mf_iters)
    examples = build_distill_set(
        teacher, conds, _schedule(cfg, args.k), cfg.mrf.trace_temperature, cfg.seed, tcfg.unary_strength_kappa
    )
    params, metrics = train(examples, "distill", tcfg, init=init)
    metrics.write(_out(cfg, "metrics_distill.tsv"), append=False)
    save_params(_out(cfg, "mrf_distilled.mgtf"), params, _artifact_meta(cfg, stage="distill"))
    return 0


def cmd_decode(cfg: RunConfig, args) -> int:
    from .bench import decode_variant

    teacher = _read_teacher(cfg, args)
    mrf = _read_mrf(cfg, args.mrf, "mrf_distilled.mgtf") if args.variant == "markovgen" else None
    sched = _schedule(cfg, args.k)
    mf_iters = cfg.mrf.mf_iterations if args.mf_iters is None else args.mf_iters
    cond = _condition(cfg)
    grids, timings = [], []
    for j in range(args.count):
        d = decode_variant(
            args.variant, teacher, mrf, cond, sched, cfg.schedule.temperature, cfg.seed + j, mf_iters, cfg.mrf.kappa
        )
        grids.append(d.grid)
        timings.append({"total_ms": d.total_ms, "teacher_ms": d.teacher_ms, "mrf_ms": d.mrf_ms})
    stem = f"decode_{args.variant}_k{sched.cut_step}"
    path = _out(cfg, f"{stem}.mgtf")
    # the grid file holds only what determines the tokens, so equal decodes give equal bytes
    labels = np.stack([g.as_2d() for g in grids])
    mgtf.write(path, {"labels": labels}, _artifact_meta(cfg, condition=cond))
    sidecar = {
        "format_version": FORMAT_VERSION,
        "config": cfg.echo(),
        "variant": args.variant,
        "k": sched.cut_step,
        "mf_iterations": mf_iters,
        "seeds": [cfg.seed + j for j in range(args.count)],
        "timings": timings,
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))
    for j, g in enumerate(grids):
        render(g, _out(cfg, f"{stem}_{j:03d}"), seed=cfg.seed, png=args.png)
    log.info("wrote %d grids to %s", len(grids), path)
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    from .bench import run_benchmark

    teacher = _read_teacher(cfg, args)
    variants = cfg.bench.variants
    mrf = _read_mrf(cfg, args.mrf, "mrf_distilled.mgtf") if "markovgen" in variants else None
    temp = cfg.schedule.temperature if cfg.bench.temperature is None else cfg.bench.temperature
    report = run_benchmark(
        teacher,
        mrf,
        [_condition(cfg)] * cfg.bench.decodes,
        _schedule(cfg, args.k),
        variants,
        cfg.bench.repetitions,
        cfg.seed,
        temp,
        cfg.mrf.mf_iterations if args.mf_iters is None else args.mf_iters,
        cfg.mrf.kappa,
    )
    doc = report.to_dict()
    doc.update(format_version=FORMAT_VERSION, run_config=cfg.echo())
    _out(cfg, "bench.json").write_text(json.dumps(doc, indent=2))
    table = report.to_table()
    _out(cfg, "bench.txt").write_text(table)
    sys.stdout.write(table)
    for f in report.failures:
        log.error("invariant failure: %s", f)
    return 1 if report.failures else 0


def cmd_verify(cfg: RunConfig, args) -> int:
    from .verify import run_all

    results = run_all(seed=cfg.seed)
    for r in results:
        print(r.line())
    report = {
        "format_version": FORMAT_VERSION,
        "config": cfg.echo(),
        "results": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results],
    }
    _out(cfg, "verify.json").write_text(json.dumps(report, indent=2))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "pretrain-mrf": cmd_pretrain_mrf,
    "distill-mrf": cmd_distill_mrf,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markovgen", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="run config (JSON)")
        s.add_argument("--output-dir", help="overrides output_dir from the config")
        s.add_argument("--seed", type=int, help="overrides seed from the config")
        s.add_argument("--k", type=int, help="cut step; defaults to schedule.cut_step")
        s.add_argument("--mf-iters", type=int, help="mean-field iterations; defaults to mrf.mf_iterations")
        s.add_argument("--variant", choices=["full", "early-exit", "markovgen"], default="markovgen")
        s.add_argument("--threads", type=int, help="intra-op thread count for numpy and torch")
        s.add_argument("--corpus", help="corpus file (default: <output_dir>/corpus.mgtf)")
        s.add_argument("--teacher", help="teacher weights (default: <output_dir>/teacher.mgtf)")
        s.add_argument("--mrf", help="MRF weights (default: <output_dir>/mrf_distilled.mgtf)")
        s.add_argument("--pretrained", help="pretrained MRF (default: <output_dir>/mrf_pretrained.mgtf)")
        s.add_argument("--count", type=int, default=1, help="decode: number of grids, seeds seed..seed+count-1")
        s.add_argument("--png", action="store_true", help="decode: also write PNG renders")
    return p


def _configure_logging():
    level = os.environ.get(LOG_ENV, "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"{LOG_ENV} must be one of {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@contextlib.contextmanager
def _thread_limit(n: int | None):
    if n is None:
        yield
        return
    import torch
    from threadpoolctl import threadpool_limits

    torch.set_num_threads(n)
    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.count < 1:
            raise ConfigError("--count must be >= 1")
        cfg = load_config(args.config, {"output_dir": args.output_dir, "seed": args.seed})
        with _thread_limit(args.threads):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationError, mgtf.MGTFError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
