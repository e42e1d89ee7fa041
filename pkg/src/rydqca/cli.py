"""Command line entry point: run, compare, spam-correct, detect-qp."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, tomllib
from .errors import InvalidArgument, NonInvertibleModel, NumericalFailure, RydqcaError
from .experiments import Artifacts, Table, run_pipeline
from .quasiparticle import detect, quasiparticle_numbers
from .spam import SpamModel, correct, table_model
from .statevec import ShotEnsemble

MANIFEST = "manifest.json"

# exit codes
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INPUT = 4


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def table_csv(t: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(t.keys + t.values)
    for row in t.rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def write_artifacts(art: Artifacts, out: Path, cfg) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"experiment": cfg.experiment, "engine": cfg.engine, "seed": cfg.seed,
                "config_sha256": cfg.digest, "version": __version__, "shots": cfg.shots,
                "tables": {}, "reports": sorted(art.reports), "shot_files": []}
    for name, t in sorted(art.tables.items()):
        (out / f"{name}.csv").write_text(table_csv(t))
        manifest["tables"][name] = {"file": f"{name}.csv", "keys": t.keys, "values": t.values, "rows": len(t.rows)}
    for name, rep in sorted(art.reports.items()):
        (out / f"{name}.json").write_text(_dump(rep))
    if art.shots:
        (out / "shots").mkdir(exist_ok=True)
        for name, sh in sorted(art.shots.items()):
            sh.save(out / "shots" / f"{name}.txt")
            manifest["shot_files"].append(f"shots/{name}.txt")
    (out / MANIFEST).write_text(_dump(manifest))
    return manifest


def _schedule_line(cfg, exc: Exception) -> int | None:
    m = re.match(r"schedule entry (\d+)", str(exc))
    if not m:
        return None
    hits = [k for k, line in enumerate(cfg.source.splitlines(), start=1) if line.strip() == "[[schedule]]"]
    idx = int(m.group(1))
    return hits[idx] if idx < len(hits) else None


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out or cfg.output or f"runs/{cfg.experiment}_{cfg.engine}_seed{cfg.seed}")
    try:
        art = run_pipeline(cfg)
    except NumericalFailure as exc:
        print(f"error: numerical failure in {cfg.path}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidArgument as exc:
        raise ConfigError(str(exc), cfg.path, _schedule_line(cfg, exc)) from None
    write_artifacts(art, out, cfg)
    print(f"wrote {len(art.tables)} table(s), {len(art.reports)} report(s), "
          f"{len(art.shots)} shot file(s) to {out}")
    return 0


# --------------------------------------------------------------------------
# compare

def _read_table(path: Path, spec: dict) -> dict[tuple, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    nk = len(spec["keys"])
    if header != spec["keys"] + spec["values"]:
        raise InvalidArgument(f"{path}: header does not match the manifest")
    return {tuple(r[:nk]): r[nk:] for r in body}


def _as_float(x: str) -> float | None:
    try:
        return float(x)
    except ValueError:
        return None


def compare_runs(a: Path, b: Path) -> list[dict]:
    """Per table and value column: max |a - b| over rows with matching keys."""
    ma = json.loads((a / MANIFEST).read_text())
    mb = json.loads((b / MANIFEST).read_text())
    if ma["experiment"] != mb["experiment"]:
        raise InvalidArgument(f"incompatible runs: {ma['experiment']} vs {mb['experiment']}")
    out = []
    shared = sorted(set(ma["tables"]) & set(mb["tables"]))
    if not shared:
        raise InvalidArgument("runs share no tables")
    for name in shared:
        sa, sb = ma["tables"][name], mb["tables"][name]
        if sa["keys"] != sb["keys"]:
            raise InvalidArgument(f"table {name}: key columns differ")
        ta = _read_table(a / sa["file"], sa)
        tb = _read_table(b / sb["file"], sb)
        common = sorted(set(ta) & set(tb))
        unmatched = len(set(ta) ^ set(tb))
        for col in [c for c in sa["values"] if c in sb["values"]]:
            ia, ib = sa["values"].index(col), sb["values"].index(col)
            devs, mismatched = [], 0
            for key in common:
                x, y = _as_float(ta[key][ia]), _as_float(tb[key][ib])
                if x is None or y is None:
                    mismatched += ta[key][ia] != tb[key][ib]
                elif math.isnan(x) and math.isnan(y):
                    devs.append(0.0)
                else:
                    devs.append(abs(x - y))
            if not devs and not mismatched:
                continue
            out.append({"table": name, "column": col, "rows": len(common), "unmatched_rows": unmatched,
                        "max_deviation": max(devs) if devs else float("nan"), "text_mismatches": mismatched})
    return out


def cmd_compare(args) -> int:
    rows = compare_runs(Path(args.a), Path(args.b))
    print("table,column,rows,unmatched_rows,max_deviation,text_mismatches")
    for r in rows:
        print(",".join(_fmt(r[k]) for k in ("table", "column", "rows", "unmatched_rows",
                                             "max_deviation", "text_mismatches")))
    if args.tol is not None:
        bad = [r for r in rows if not r["max_deviation"] <= args.tol]
        return 1 if bad else 0
    return 0


# --------------------------------------------------------------------------
# shot-file tools

def _load_shots(path: str) -> ShotEnsemble:
    try:
        return ShotEnsemble.load(path)
    except OSError as exc:
        raise InvalidArgument(f"{path}: cannot read shots ({exc.strerror})") from None


def _load_spam(path: str) -> tuple[SpamModel, str | None]:
    text = Path(path).read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"not valid TOML ({exc})", path, int(m.group(1)) if m else None) from None
    pattern = doc.pop("pattern", None)
    preset = doc.pop("preset", None)
    if preset is not None:
        if preset not in ("table", "raw"):
            raise ConfigError(f"unknown preset {preset!r}", path)
        model = table_model(corrected=preset == "table")
    else:
        block = doc.get("spam", doc)
        if not block:
            raise ConfigError("no SPAM parameters found", path)
        try:
            model = SpamModel.from_dict(block)
        except (InvalidArgument, AttributeError, TypeError) as exc:
            raise ConfigError(str(exc), path) from None
    return model, pattern


def cmd_spam_correct(args) -> int:
    shots = _load_shots(args.shots)
    model, pattern = _load_spam(args.params)
    pattern = args.pattern or pattern or shots.meta.get("pattern")
    if not pattern:
        raise InvalidArgument("species pattern unknown: pass --pattern or set 'pattern' in the params file")
    if len(pattern) != shots.n_sites:
        raise InvalidArgument(f"pattern has {len(pattern)} sites, shots have {shots.n_sites}")
    res = correct(shots, pattern, model)
    measured = shots.to_distribution().probs
    print(f"# shots: {shots.n_shots}, clipped_mass: {_fmt(res.clipped_mass)}")
    print("bitstring,measured,corrected")
    for i in np.flatnonzero((measured > 0) | (res.probs > args.min_prob)):
        print(f"{i:0{shots.n_sites}b},{_fmt(measured[i])},{_fmt(res.probs[i])}")
    return 0


def cmd_detect_qp(args) -> int:
    shots = _load_shots(args.shots)
    q, w = quasiparticle_numbers(shots)
    print(f"# shots: {shots.n_shots}, mean_Q: {_fmt(q @ w / w.sum())}")
    if args.per_shot:
        print("shot,Q,positions")
        for k, s in enumerate(shots.strings()):
            rec = detect(s, k)
            print(f"{k},{rec.Q},{' '.join(map(str, rec.positions))}")
    else:
        print("Q,count")
        vals, counts = np.unique(q, return_counts=True)
        for v, c in zip(vals, counts):
            print(f"{int(v)},{int(c)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rydqca", description=__doc__)
    ap.add_argument("--version", action="version", version=f"rydqca {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a named experiment from a TOML config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="per-observable max deviation between two run directories")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tol", type=float, help="exit 1 if any deviation exceeds this")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("spam-correct", help="SPAM-correct a shot file")
    p.add_argument("shots")
    p.add_argument("params", help="TOML with per-species parameters or preset = 'table'")
    p.add_argument("--pattern", help="species per site, e.g. ABABA")
    p.add_argument("--min-prob", type=float, default=1e-12)
    p.set_defaults(func=cmd_spam_correct)

    p = sub.add_parser("detect-qp", help="quasiparticle numbers of a shot file")
    p.add_argument("shots")
    p.add_argument("--per-shot", action="store_true")
    p.set_defaults(func=cmd_detect_qp)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NonInvertibleModel as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RydqcaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if not isinstance(exc, InvalidArgument) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
