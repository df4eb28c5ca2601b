"""Command-line harness: ``pseaec {gen-data,train,eval,enhance,inspect}``.

Every command resolves a :class:`RunConfig` from an optional JSON file plus
flag overrides (flags win) and writes the resolved config into its output
directory. Failures print one JSON line ``{"error": kind, "message": ...}``
to stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import read_wav, write_wav
from .embedding import embedding_for, load_embeddings
from .metrics import MetricsParams, evaluate
from .models import (CheckpointError, ModelConfig, build_model, causality_check, enhance_streaming,
                     load_model, param_breakdown, param_count, tiny_config)
from .scene import ScenarioKind, make_scenario_set, make_training_pool, write_manifest
from .train import TaskKind, TrainConfig, train

log = logging.getLogger("pseaec")

SCENARIOS = [k.value for k in ScenarioKind] + ["train"]


class CliError(Exception):
    def __init__(self, kind, message, code=1):
        super().__init__(message)
        self.kind, self.code = kind, code


@dataclass
class SceneOptions:
    duration: float = 20.0
    n_speakers: int = 109
    echo_delay: int | None = None


@dataclass
class RunConfig:
    """Everything a command needs; ``to_dict`` is what lands in ``config.json``."""
    seed: int = 0
    out_dir: str = "run"
    scene: SceneOptions = field(default_factory=SceneOptions)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)
    metrics: MetricsParams = field(default_factory=MetricsParams)
    paths: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "scene": asdict(self.scene),
            "model": self.model.to_dict(),
            "train": dict(self.train),
            "metrics": asdict(self.metrics),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            seed=int(d.get("seed", 0)),
            out_dir=d.get("out_dir", "run"),
            scene=SceneOptions(**d.get("scene", {})),
            model=ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig(),
            train=dict(d.get("train", {})),
            metrics=MetricsParams(**d.get("metrics", {})),
            paths=dict(d.get("paths", {})),
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", code=2)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _common(p):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")


def _model_flags(p):
    p.add_argument("--variant", choices=["e3net", "vfl"])
    p.add_argument("--task", choices=["aec", "pse", "pse_aec"])
    p.add_argument("--ablation", choices=["naive", "no_sc", "sc"])
    p.add_argument("--tiny", action="store_true", help="use the desk-scale overfit model sizes")


def build_parser():
    parser = _Parser(prog="pseaec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="simulate a training pool or an evaluation scenario set")
    _common(p)
    p.add_argument("--scenario", choices=SCENARIOS, required=True)
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--n-speakers", type=_positive_int)
    p.add_argument("--echo-delay", type=int, help="fixed echo delay in samples (default: random)")

    p = sub.add_parser("train", help="multi-task training into a run directory")
    _common(p)
    _model_flags(p)
    p.add_argument("--pool", help="manifest shared by every task")
    for t in TaskKind:
        p.add_argument(f"--manifest-{t.value.lower().replace('_', '-')}", dest=f"manifest_{t.value}",
                       help=f"manifest for {t.value} mini-batches")
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--crop", type=_positive_int, help="crop length in samples")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="score a checkpoint on scenario manifests")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--path", choices=["full", "bypass"], default="full")

    p = sub.add_parser("enhance", help="enhance one recording with the streaming path")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mic", required=True)
    p.add_argument("--farend")
    p.add_argument("--speaker", help="target speaker id")
    p.add_argument("--embeddings", help="embedding table (id<TAB>values); default: seeded lookup")
    p.add_argument("--out", required=True)
    p.add_argument("--path", choices=["full", "bypass"], default="full")
    p.add_argument("--chunk", type=_positive_int, default=10, help="chunk size in hops")

    p = sub.add_parser("inspect", help="parameter counts and a causality self-test")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--trials", type=_positive_int, default=3)
    return parser


def resolve(args):
    """Merge the config file with command-line flags (flags win)."""
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise CliError("config", f"cannot read {args.config}: {e.strerror}")
        except ValueError as e:
            raise CliError("config", f"{args.config} is not valid JSON: {e}")
    try:
        cfg = RunConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir

    for flag, key in (("duration", "duration"), ("n_speakers", "n_speakers"), ("echo_delay", "echo_delay")):
        if getattr(args, flag, None) is not None:
            setattr(cfg.scene, key, getattr(args, flag))

    if hasattr(args, "variant"):
        overrides = {k: getattr(args, k) for k in ("variant", "task", "ablation") if getattr(args, k)}
        if overrides.get("task", "pse_aec") != "pse_aec" and "ablation" not in overrides:
            overrides["ablation"] = None
        try:
            if args.tiny:
                base_model = {k: v for k, v in cfg.model.to_dict().items()
                              if k in ("variant", "task", "ablation", "win", "hop", "compress_p")}
                base_model.update(overrides)
                cfg.model = tiny_config(**base_model)
            elif overrides:
                cfg.model = cfg.model.replace(**overrides)
        except ValueError as e:
            raise CliError("config", str(e))

    for flag in ("steps", "batch_size", "lr", "crop", "checkpoint_every"):
        if getattr(args, flag, None) is not None:
            cfg.train[flag] = getattr(args, flag)
    if getattr(args, "pool", None):
        cfg.paths["pool"] = args.pool
    for t in TaskKind:
        v = getattr(args, f"manifest_{t.value}", None)
        if v:
            cfg.paths.setdefault("manifests", {})[t.value] = v
    return cfg


def _write_config(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _load_checkpoint(path):
    if not Path(path).exists():
        raise CliError("missing-file", f"checkpoint not found: {path}")
    try:
        model, _, meta = load_model(path)
    except CheckpointError as e:
        raise CliError("checkpoint", str(e))
    model.eval()
    return model, meta


def cmd_gen_data(args, cfg):
    out = Path(cfg.out_dir)
    sc = cfg.scene
    if args.scenario == "train":
        samples = make_training_pool(args.count, cfg.seed, sc.duration, sc.n_speakers, sc.echo_delay)
    else:
        samples = make_scenario_set(args.scenario, args.count, cfg.seed, sc.duration, sc.n_speakers,
                                    sc.echo_delay)
    _write_config(cfg, out)
    path = write_manifest(samples, out, args.scenario)
    print(path)
    return 0


def cmd_train(args, cfg):
    out = Path(cfg.out_dir)
    manifests = dict(cfg.paths.get("manifests", {}))
    pool = cfg.paths.get("pool")
    from .train import task_cycle
    for t in task_cycle(cfg.model):
        path = manifests.get(t.value) or pool
        if not path:
            raise CliError("missing-manifest", f"no training manifest for task {t.value}")
        if not Path(path).exists():
            raise CliError("missing-manifest", f"manifest for task {t.value} not found: {path}")
    try:
        tc = TrainConfig(seed=cfg.seed, out_dir=str(out), pool_manifest=pool, manifests=manifests,
                         model=cfg.model, **cfg.train)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e))
    _write_config(cfg, out)
    (out / "reports").mkdir(exist_ok=True)
    try:
        final = train(tc, resume=args.resume)
    except ValueError as e:
        raise CliError("train", str(e))
    print(final)
    return 0


def cmd_eval(args, cfg):
    model, _ = _load_checkpoint(args.checkpoint)
    if args.config and "model" in json.loads(Path(args.config).read_text()) and cfg.model != model.config:
        raise CliError("config-mismatch", f"checkpoint is {model.config.describe()} "
                                          f"but the config asks for {cfg.model.describe()}")
    if args.path == "bypass" and not model.has_bypass:
        raise CliError("usage", f"model {model.config.describe()} has no bypass path", code=2)
    out = Path(cfg.out_dir)
    cfg.model = model.config
    _write_config(cfg, out)
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    for m in args.manifest:
        if not Path(m).exists():
            raise CliError("missing-file", f"manifest not found: {m}")
        report = evaluate(model, m, cfg.metrics, path=args.path)
        name = f"{report.scenario}_{args.path}.json"
        (reports / name).write_text(report.to_json() + "\n")
        print(report.table())
    return 0


def cmd_enhance(args, cfg):
    model, _ = _load_checkpoint(args.checkpoint)
    if args.path == "bypass" and not model.has_bypass:
        raise CliError("usage", f"model {model.config.describe()} has no bypass path", code=2)
    try:
        mic = read_wav(args.mic)
        far = read_wav(args.farend) if args.farend else None
    except FileNotFoundError as e:
        raise CliError("missing-file", f"input not found: {e.filename}")
    except ValueError as e:
        raise CliError("audio-format", str(e))
    if far is not None and len(far) != len(mic):
        raise CliError("audio-format", f"far-end has {len(far)} samples, mic has {len(mic)}")
    if model.config.has_far and far is None:
        log.warning("no --farend given; using an all-zero far-end signal")
        far = np.zeros_like(mic)

    emb = None
    if model.is_personalized and args.path == "full":
        if not args.speaker:
            raise CliError("usage", f"model {model.config.describe()} needs --speaker", code=2)
        if args.embeddings:
            table = {e.speaker_id: e for e in load_embeddings(args.embeddings)}
            if args.speaker not in table:
                raise CliError("unknown-speaker", f"speaker {args.speaker!r} not in {args.embeddings}")
            emb = table[args.speaker]
        else:
            emb = embedding_for(args.speaker)

    step = args.chunk * model.config.hop
    mic_chunks = [mic[i:i + step] for i in range(0, len(mic), step)]
    far_chunks = None if far is None else [far[i:i + step] for i in range(0, len(far), step)]
    out = enhance_streaming(model, mic_chunks, far_chunks, emb, path=args.path)
    write_wav(args.out, out)
    print(args.out)
    return 0


def cmd_inspect(args, cfg):
    if args.checkpoint:
        model, meta = _load_checkpoint(args.checkpoint)
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        meta = {}
    c = model.config
    print(f"model        {c.describe()}")
    if meta.get("step") is not None:
        print(f"step         {meta['step']}")
    print(f"parameters   {param_count(model)} ({param_count(model) / 1e6:.3f} M)")
    for name, n in param_breakdown(model).items():
        print(f"  {name:<12} {n}")
    paths = ["full", "bypass"] if model.has_bypass else ["full"]
    worst = max(causality_check(model, trials=args.trials, seed=cfg.seed, path=p) for p in paths)
    print(f"causality    {'pass' if worst < 1e-6 else 'FAIL'} (max diff {worst:.3g})")
    if c.has_align:
        print(f"align window {c.align_window} frames ({c.align_window * c.hop / 16000 * 1000:.0f} ms)")
    else:
        print("align window none")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "enhance": cmd_enhance, "inspect": cmd_inspect}


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except CliError as e:
        return _fail(e.kind, str(e), e.code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except CliError as e:
        return _fail(e.kind, str(e), e.code)
    except (ValueError, OSError) as e:
        return _fail(type(e).__name__, str(e).replace("\n", " "), 1)


if __name__ == "__main__":
    sys.exit(main())
