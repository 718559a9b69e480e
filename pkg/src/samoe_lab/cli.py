"""Command-line entry point: gen-scenes, train, sample, eval, verify, bench."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import torch

from . import bench, planner as pl, scenes as sc, verify
from .numerics import save_tensor

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "SAMOE_LAB_SEED"


class ConfigError(ValueError):
    pass


class VerificationFailed(RuntimeError):
    pass


def parse_value(text: str) -> Any:
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    return t


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Flat ``section.key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        out[key] = parse_value(value)
    return out


def load_config_file(path: str) -> dict[str, Any]:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
        return _flatten(data)
    return parse_config_text(text, path)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunConfig:
    values: dict[str, Any]
    overrides: dict[str, Any]
    seed: int
    out_dir: Path | None
    consumed: set[str] = field(default_factory=set)

    def get(self, key: str, default: Any = None) -> Any:
        self.consumed.add(key)
        return self.values.get(key, default)

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        keys = [k for k in self.values if k.startswith(p)]
        self.consumed.update(keys)
        return {k[len(p):]: self.values[k] for k in keys}

    def unused(self) -> list[str]:
        return sorted(set(self.values) - self.consumed - {"seed"})

    def resolved(self) -> dict:
        return {"values": dict(sorted(self.values.items())), "overrides": dict(sorted(self.overrides.items())),
                "seed": self.seed, "unused_keys": self.unused()}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (JSON also accepted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help=f"seed (falls back to config 'seed', then ${SEED_ENV}, then 0)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")

    p = argparse.ArgumentParser(prog="samoe-lab", description="Scene-adaptive MoE planning lab.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{gen-scenes,train,sample,eval,verify,bench}")

    g = sub.add_parser("gen-scenes", parents=[common], help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--regimes", help="comma-separated regimes (default: all)")

    t = sub.add_parser("train", parents=[common], help="run a training step of the two-step schedule")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--step", type=int, choices=(1, 2), required=True)
    t.add_argument("--init", help="step-1 checkpoint directory (required for --step 2)")

    s = sub.add_parser("sample", parents=[common], help="sample trajectories with the Euler ODE solver")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", parents=[common], help="open-loop evaluation report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="report file name (default report.json inside --out)")
    e.add_argument("--out", help="output directory (default: the report's directory)")

    v = sub.add_parser("verify", parents=[common], help="run verification suites")
    v.add_argument("suite", choices=("theory", *verify.SUITES, "all"))
    v.add_argument("--exp", default="all", help="theory experiment name or 'all'")
    v.add_argument("--out", help="report file (.json) or output directory")

    b = sub.add_parser("bench", parents=[common], help="FLOPs model and measured layer benchmark")
    b.add_argument("--out", required=True, help="CSV file")
    b.add_argument("--json", help="JSON report file (default: next to the CSV)")
    b.add_argument("--reps", type=int)
    return p


def resolve_seed(cli_seed: int | None, values: dict) -> int:
    if cli_seed is not None:
        return cli_seed
    if "seed" in values:
        return int(values["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def parse_args(argv: Sequence[str]) -> tuple[argparse.Namespace, RunConfig]:
    args = build_parser().parse_args(argv)
    values = load_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    values.update(overrides)
    seed = resolve_seed(args.seed, values)
    return args, RunConfig(values=values, overrides=overrides, seed=seed, out_dir=None)


# ---------------------------------------------------------------------------
# output bookkeeping


def write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(out_dir: Path, names: Sequence[str] | None = None) -> dict:
    """sha256 of every file under out_dir, or only of ``names`` when the directory is shared."""
    paths = [out_dir / n for n in names] if names is not None else [p for p in out_dir.rglob("*") if p.is_file()]
    files = {}
    for f in sorted(paths):
        rel = f.relative_to(out_dir).as_posix()
        if rel == "MANIFEST.json":
            continue
        files[rel] = hashlib.sha256(f.read_bytes()).hexdigest()
    manifest = {"files": files}
    write_json(out_dir / "MANIFEST.json", manifest)
    return manifest


def finish(rc: RunConfig, names: Sequence[str] | None = None) -> None:
    for k in rc.unused():
        print(f"warning: config key {k!r} was not used", file=sys.stderr)
    write_json(rc.out_dir / "resolved.json", rc.resolved())
    write_manifest(rc.out_dir, None if names is None else list(names) + ["resolved.json"])


def planner_config(rc: RunConfig, base: pl.PlannerConfig | None = None) -> pl.PlannerConfig:
    values = {f.name: getattr(base, f.name) for f in fields(pl.PlannerConfig)} if base else {}
    sec = rc.section("planner")
    known = {f.name for f in fields(pl.PlannerConfig)}
    bad = set(sec) - known
    if bad:
        raise ConfigError(f"unknown planner keys: {sorted(bad)}")
    values.update(sec)
    steps = rc.get("train.steps")
    if steps is not None:
        values["steps"] = steps
    values["seed"] = rc.seed
    return pl.PlannerConfig.from_dict(values)


def _split_out(path: str, default_name: str) -> tuple[Path, str]:
    p = Path(path)
    if p.suffix in (".json", ".csv"):
        return p.parent if str(p.parent) else Path("."), p.name
    return p, default_name


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args, rc: RunConfig) -> int:
    count = args.count if args.count is not None else int(rc.get("scenes.count", 256))
    regimes = args.regimes or rc.get("scenes.regimes", ",".join(sc.REGIMES))
    regimes = [r.strip() for r in str(regimes).split(",") if r.strip()]
    unknown = [r for r in regimes if r not in sc.REGIMES]
    if unknown:
        raise ConfigError(f"unknown regimes {unknown}; choose from {', '.join(sc.REGIMES)}")
    rc.out_dir = Path(args.out)
    scenes = sc.generate(count, regimes, rc.seed)
    sc.dataset_write(scenes, rc.out_dir / "data")
    write_json(rc.out_dir / "digest.json", {"scene_digest": sc.scene_digest(scenes), "count": count})
    finish(rc)
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    ds = _load_data(args.data)
    rc.out_dir = Path(args.out)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    losses = []
    log = lambda step, loss: losses.append((step, loss))
    try:
        if args.step == 1:
            cfg = planner_config(rc)
            ckpt = pl.train_step1(ds, cfg, log=log)
        else:
            init = args.init or rc.get("train.init")
            if not init:
                raise ConfigError("train --step 2 needs --init <step-1 checkpoint>")
            ckpt1 = pl.load_checkpoint(init)
            cfg = planner_config(rc, ckpt1.config)
            ckpt = pl.train_step2(ckpt1, ds, cfg, log=log)
    except pl.TrainingAborted as e:
        pl.save_checkpoint(e.last_good, rc.out_dir / "last_good")
        raise
    pl.save_checkpoint(ckpt, rc.out_dir / "ckpt")
    (rc.out_dir / "loss.csv").write_text("step,loss\n" + "".join(f"{s},{v!r}\n" for s, v in losses))
    finish(rc)
    return EXIT_OK


def _load_data(path: str) -> sc.Dataset:
    p = Path(path)
    if not (p / "manifest.json").exists() and (p / "data" / "manifest.json").exists():
        p = p / "data"
    return sc.dataset_read(p)


def _load_model(path: str) -> pl.Planner:
    p = Path(path)
    if not (p / "meta.json").exists() and (p / "ckpt" / "meta.json").exists():
        p = p / "ckpt"
    return pl.model_from_checkpoint(pl.load_checkpoint(p))


def cmd_sample(args, rc: RunConfig) -> int:
    model = _load_model(args.ckpt)
    ds = _load_data(args.data)
    rc.out_dir = Path(args.out)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    n = rc.get("sample.ode_steps")
    pred = pl.sample_dataset(model, ds, rc.seed, n_steps=int(n) if n else None)
    save_tensor(rc.out_dir / "trajectories.ndt", pred)
    finish(rc)
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    model = _load_model(args.ckpt)
    ds = _load_data(args.data)
    if args.out:
        rc.out_dir, name = Path(args.out), Path(args.report).name if args.report else "report.json"
    elif args.report:
        rc.out_dir, name = _split_out(args.report, "report.json")
    else:
        raise ConfigError("eval needs --out or --report")
    pred = pl.sample_dataset(model, ds, rc.seed)
    report = pl.evaluate_predictions(pred, ds)
    problems = pl.validate_report(report)
    write_json(rc.out_dir / name, report)
    finish(rc, [name])
    if problems:
        raise VerificationFailed("; ".join(problems))
    return EXIT_OK


def cmd_verify(args, rc: RunConfig) -> int:
    results = verify.run_suite(args.suite, rc.seed, args.exp)
    ok = all(r["passed"] for r in results)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}" + (f" ({r['status']})" if "status" in r else ""))
    if args.out:
        # without --out nothing is written
        rc.out_dir, name = _split_out(args.out, "verify.json")
        write_json(rc.out_dir / name, {"suite": args.suite, "seed": rc.seed, "passed": ok, "results": results})
        finish(rc, [name])
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench(args, rc: RunConfig) -> int:
    rc.out_dir, csv_name = _split_out(args.out, "bench.csv")
    json_name = Path(args.json).name if args.json else Path(csv_name).with_suffix(".json").name
    sec = rc.section("bench")
    sec.update({k: v for k, v in rc.values.items() if "." not in k and k != "seed"})
    rc.consumed.update(k for k in rc.values if "." not in k)
    reps = args.reps or int(sec.pop("reps", 10))
    cfg = bench.CostConfig.from_dict(sec)
    report = bench.run_bench(cfg, reps=reps, seed=rc.seed)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    (rc.out_dir / csv_name).write_text(report.to_csv())
    write_json(rc.out_dir / json_name, report.to_dict())
    finish(rc, [csv_name, json_name])
    return EXIT_OK


COMMANDS = {"gen-scenes": cmd_gen_scenes, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "verify": cmd_verify, "bench": cmd_bench}


def _failure(rc: RunConfig | None, command: str, exc: BaseException, code: int) -> int:
    info = {"command": command, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, pl.TrainingAborted):
        info["step"] = exc.step
    print(json.dumps(info), file=sys.stderr)
    if rc is not None and rc.out_dir is not None:
        try:
            write_json(rc.out_dir / "failure.json", info)
        except OSError:
            pass
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rc = parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (ConfigError, OSError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args, rc)
    except ConfigError as e:
        return _failure(rc, args.command, e, EXIT_USAGE)
    except VerificationFailed as e:
        return _failure(rc, args.command, e, EXIT_VERIFY)
    except Exception as e:  # never let user input crash with a traceback only
        if os.environ.get("SAMOE_LAB_DEBUG"):
            traceback.print_exc()
        return _failure(rc, args.command, e, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
