"""Command-line interface: datasets, training, evaluation, A/B runs and scene dumps.

Every command writes its outputs into ``--out`` together with the resolved
config (``config.ini``) and a run manifest (``run_manifest.json``) holding
SHA-256 digests of all inputs and outputs.

Exit codes: 0 success, 1 usage or config error, 2 data or schema error,
3 internal invariant violation.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .config import config_hash, format_config, load_config
from .eoat import generate_candidates
from .errors import ConfigError, DataError, InvariantError, PickRankError
from .evaluation import evaluate_scores, format_auc_table, run_ab_test
from .features import SCHEMA_VERSION, feature_matrix
from .gbdt import MODEL_FORMAT, EnsembleModel, load_model, model_to_json, train_boosted, train_ensemble
from .oracle import (
    dataset_arrays, generate_dataset, generate_eval_dataset, load_dataset, load_oracle,
    make_past_oracle, oracle_to_json, save_dataset, success_probs,
)
from .perception import graph_to_dot, heightmap_to_pgm, perceive
from .ranking import ARMS, GRAMMAR, ModelScorer, first_feasible, rank_picks, resolve_arm
from .scene import generate_scene, load_scene, scene_to_dict
from .seeding import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
CONFIG_NAME = "config.ini"


class UsageError(PickRankError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- files and manifests ----------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunWriter:
    """Collects output files of one command and writes the run manifest."""

    def __init__(self, out_dir, command, argv, run):
        self.out_dir = out_dir
        self.command = command
        self.argv = list(argv)
        self.run = run
        self.inputs = {}
        self.outputs = []
        self.t0 = time.perf_counter()
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def add_input(self, path):
        self.inputs[os.path.abspath(path)] = sha256_file(path)

    def write_bytes(self, name, data):
        with open(self.path(name), "wb") as fh:
            fh.write(data)
        self.outputs.append(name)
        return self.path(name)

    def write_text(self, name, text):
        return self.write_bytes(name, text.encode("utf-8"))

    def register(self, name):
        self.outputs.append(name)

    def finish(self, extra=None):
        self.write_text(CONFIG_NAME, format_config(self.run))
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config_hash": config_hash(self.run),
            "inputs": self.inputs,
            "outputs": {name: sha256_file(self.path(name)) for name in sorted(set(self.outputs))},
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
            "versions": {
                "pickrank": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "feature_schema": SCHEMA_VERSION,
                "model_format": MODEL_FORMAT,
            },
        }
        if extra:
            manifest.update(extra)
        with open(self.path(MANIFEST_NAME), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return manifest


def verify_manifest(out_dir):
    """Names of outputs whose digest no longer matches the run manifest."""
    with open(os.path.join(out_dir, MANIFEST_NAME), encoding="utf-8") as fh:
        manifest = json.load(fh)
    return [name for name, digest in manifest["outputs"].items()
            if sha256_file(os.path.join(out_dir, name)) != digest]


# -- shared helpers -----------------------------------------------------------------------

def _config_from_args(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return load_config(args.config, overrides)


def _oracle_from_args(args, run):
    if getattr(args, "oracle", None):
        return load_oracle(args.oracle)
    return run.resolve_oracle()


def _load_xy(paths):
    X, y, names = [], [], []
    for p in paths:
        records, manifest = load_dataset(p)
        if not records:
            raise DataError(f"dataset {p} is empty")
        Xp, yp, _ = dataset_arrays(records)
        X.append(Xp)
        y.append(yp)
        names.append(manifest.name)
    return np.concatenate(X), np.concatenate(y), names


def _curve_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr"])
    for fpr, tpr in curve:
        w.writerow([repr(fpr), repr(tpr)])
    return buf.getvalue()


def _model_label(model):
    return "BoostedTree-Ensemble" if isinstance(model, EnsembleModel) else "BoostedTree"


# -- commands ------------------------------------------------------------------------------

def cmd_gen_dataset(args, argv):
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.drift is not None and args.drift < 0:
        raise UsageError("--drift must be non-negative")
    run = _config_from_args(args)
    seed = run.run.seed
    oracle = _oracle_from_args(args, run)
    if args.drift is not None:
        oracle = make_past_oracle(oracle, args.drift, derive_seed(seed, "past-oracle"))
    name = args.name or f"{args.policy}{'-eval' if args.eval else ''}"
    out = RunWriter(args.out, "gen-dataset", argv, run)
    if args.oracle:
        out.add_input(args.oracle)
    cfg = run.stream_config()
    if args.eval:
        records, manifest = generate_eval_dataset(name, args.n, args.policy, oracle, seed, cfg)
    else:
        records, manifest = generate_dataset(name, args.n, args.policy, args.fail_fraction,
                                             oracle, seed, cfg)
    data_name = f"{name}.jsonl.gz"
    man_name = f"{name}.manifest.json"
    save_dataset(records, manifest, out.path(data_name), out.path(man_name))
    out.register(data_name)
    out.register(man_name)
    out.write_text("oracle.json", oracle_to_json(oracle))
    out.finish()
    n = manifest.n_success + manifest.n_fail
    print(f"{name}: {n} records, {manifest.n_fail} failures ({manifest.n_fail / n:.3f}), "
          f"{manifest.n_streamed} inducts simulated, oracle {oracle.drift_tag}")
    return EXIT_OK


def cmd_train(args, argv):
    if args.members not in (1, 5):
        raise UsageError("--members must be 1 (single model) or 5 (ensemble)")
    run = _config_from_args(args)
    cfg = run.train if args.seed is None else replace(run.train, seed=args.seed)
    X, y, names = _load_xy(args.data)
    out = RunWriter(args.out, "train", argv, run)
    for p in args.data:
        out.add_input(p)
    if args.members == 1:
        model = train_boosted((X, y), cfg)
        members = [model]
    else:
        model = train_ensemble((X, y), cfg)
        members = list(model.members)
    out.write_text("model.json", model_to_json(model))
    lines = [f"datasets: {', '.join(names)}", f"rows: {y.size} ({int(y.sum())} successes)"]
    for k, m in enumerate(members):
        meta = m.training_meta
        trace = meta["valid_auc"]
        lines.append(f"member {k}: {meta['n_trees']} trees, stop {meta['stop_reason']}, "
                     f"best validation AUC {_fmt(meta['best_valid_auc'])}")
        step = max(1, len(trace) // 10)
        lines.append("  validation AUC trace: " + " ".join(
            f"{i}:{trace[i]:.4f}" for i in range(0, len(trace), step)))
    report = "\n".join(lines) + "\n"
    out.write_text("training_report.txt", report)
    out.finish()
    sys.stdout.write(report)
    return EXIT_OK


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args, argv):
    if args.model is None and not args.baseline and not args.ceiling:
        raise UsageError("give --model, --baseline always-success or --ceiling")
    run = _config_from_args(args)
    out = RunWriter(args.out, "eval", argv, run)
    model = None
    if args.model:
        model = load_model(args.model)
        out.add_input(args.model)
    reports = []
    seed = run.run.seed
    for path in args.data:
        out.add_input(path)
        records, manifest = load_dataset(path)
        X, y, p = dataset_arrays(records)
        scorers = []
        if args.baseline:
            scorers.append(("AlwaysSuccess", np.ones(y.size)))
        if model is not None:
            scorers.append((_model_label(model), model.predict_prob(X)))
        if args.ceiling:
            scorers.append(("TrueProbability", p))
        for label, scores in scorers:
            name = f"{label}@{manifest.name}"
            rep = evaluate_scores(name, scores, y, args.resamples, 0.95, seed)
            reports.append(rep)
            out.write_text(f"roc_{label}_{manifest.name}.csv", _curve_csv(rep.curve))
    table = format_auc_table(reports)
    out.write_text("eval_report.txt", table)
    out.write_text("eval_report.json", json.dumps(
        {"format": "pickrank.eval/1", "reports": [r.to_dict() for r in reports]},
        sort_keys=True, indent=1) + "\n")
    out.finish()
    sys.stdout.write(table)
    return EXIT_OK


def _parse_arms(text):
    arms = [a.strip() for a in text.split(",") if a.strip()]
    if len(arms) < 2:
        raise UsageError(f"--arms needs at least two arms; each is a name "
                         f"({', '.join(ARMS)}) or a ranker {GRAMMAR}")
    try:
        return [resolve_arm(a) for a in arms]
    except ConfigError as exc:
        raise UsageError(f"{exc}; arms are names ({', '.join(ARMS)}) or rankers") from None


def _model_registry(specs, out):
    registry = {}
    for item in specs or ():
        key, sep, path = item.partition("=")
        if not sep:
            key, path = "*", item
        registry[key] = load_model(path)
        out.add_input(path)
    return registry


def cmd_ab(args, argv):
    if args.scenes < 1:
        raise UsageError("--scenes must be positive")
    arms = _parse_arms(args.arms)
    run = _config_from_args(args)
    out = RunWriter(args.out, "ab", argv, run)
    if args.oracle:
        out.add_input(args.oracle)
    oracle = _oracle_from_args(args, run)
    registry = _model_registry(args.model, out)
    episodes = []
    on_episode = None
    if args.episodes:
        def on_episode(arm, ep):
            episodes.append(json.dumps(dict(ep.to_dict(), arm=arm), sort_keys=True,
                                       separators=(",", ":")) + "\n")
    report = run_ab_test(arms, args.scenes, run.scene, oracle, registry, run.run.seed,
                         run.limits, run.episode_config(), on_episode)
    table = report.format_table()
    out.write_text("ab_report.txt", table)
    out.write_text("ab_report.json", report.to_json())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "ranker", "attempts", "successes", "holding_failures",
                "planning_failures", "success_rate"])
    for a in report.arms:
        w.writerow([a.name, a.ranker, a.attempts, a.successes, a.holding_failures,
                    a.planning_failures, repr(a.success_rate)])
    out.write_text("ab_arms.csv", buf.getvalue())
    if args.episodes:
        out.write_text("episodes.jsonl", "".join(episodes))
    out.finish()
    sys.stdout.write(table)
    return EXIT_OK


def cmd_inspect(args, argv):
    run = _config_from_args(args)
    name, spec = _parse_ranker_arg(args.ranker)
    out = RunWriter(args.out, "inspect", argv, run)
    if args.scene:
        scene = load_scene(args.scene)
        out.add_input(args.scene)
    else:
        scene = generate_scene(run.scene, args.scene_seed)
    model = None
    if args.model:
        model = load_model(args.model)
        out.add_input(args.model)
    if spec.needs_model and model is None:
        raise UsageError(f"ranker {spec} needs --model")
    eoat = run.eoat
    products = perceive(scene, run.perception)
    seed = run.run.seed
    cands = generate_candidates(products, spec.pick_policy, run.episode.picks_per_segment,
                                derive_seed(seed, "inspect"), eoat, run.limits,
                                run.episode.random_radius)
    X = feature_matrix(products, cands.picks, eoat)
    scorer = ModelScorer(model, eoat) if model is not None else None
    ranked = rank_picks(spec, products, cands, scorer, eoat, X)
    first = first_feasible(ranked, scene, products.heightmap, run.limits, eoat)
    true_p = None
    if args.oracle:
        out.add_input(args.oracle)
        oracle = load_oracle(args.oracle)
        index = {id(p): k for k, p in enumerate(cands.picks)}
        true_p = success_probs(oracle, X[[index[id(p)] for p in ranked.picks]]) if len(ranked.picks) else []
    out.write_bytes("heightmap.pgm", heightmap_to_pgm(products.heightmap))
    out.write_text("adjacency.dot", graph_to_dot(products.graph))
    out.write_text("scene.json", json.dumps(scene_to_dict(scene), sort_keys=True, indent=1) + "\n")
    text = _inspect_table(name, spec, products, ranked, first, model is not None, true_p)
    out.write_text("ranking.txt", text)
    out.finish()
    sys.stdout.write(text)
    return EXIT_OK


def _parse_ranker_arg(text):
    try:
        return resolve_arm(text)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _inspect_table(name, spec, products, ranked, first, with_model, true_p):
    g = products.graph
    seg_rows, seen = [], {}
    for e in ranked.entries:
        if e.pick.segment_id not in seen:
            seen[e.pick.segment_id] = len(seen) + 1
            s = products.segments[e.pick.segment_id]
            seg_rows.append(
                f"{seen[s.id]:>4}  {s.id:>7}  {s.package_id:>7}  {s.material_label:<9}  "
                f"{g.occlusion_level[s.id]:>5}  {g.rank[s.id]:>4}  {s.max_height:>6.3f}  "
                f"{s.visible_area:>6.4f}" + (f"  {e.segment_score:>6.4f}" if with_model else ""))
    lines = [f"ranker {name} ({spec})", "", "segments",
             "rank  segment  package  material   level  adj  height  area"
             + ("    P_seg" if with_model else "")]
    lines += seg_rows
    lines += ["", "picks (* = first feasible)",
              "  pos  seg_rank  segment  pick  cups  x       y       z       yaw"
              + ("     prob" if with_model else "") + ("     true" if true_p is not None else "")]
    for k, e in enumerate(ranked.entries):
        p = e.pick
        row = (f"{'*' if k == first else ' '}{k + 1:>4}  {seen[p.segment_id]:>8}  {p.segment_id:>7}  "
               f"{p.pick_id:>4}  {len(p.active_cups):>4}  {p.point[0]:.4f}  {p.point[1]:.4f}  "
               f"{p.point[2]:.4f}  {np.degrees(p.yaw):>4.0f}")
        if with_model:
            row += f"  {e.pick_score:.4f}"
        if true_p is not None:
            row += f"  {float(true_p[k]):.4f}"
        lines.append(row)
    if first < 0:
        lines.append("no feasible pick: planning failure")
    return "\n".join(lines) + "\n"


# -- parser ----------------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key/value config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config setting (repeatable)")
    p.add_argument("--seed", type=int, help="top-level seed (overrides run.seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallelism cap; results never depend on it (runs are sequential)")


def build_parser():
    parser = _Parser(prog="pickrank", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"pickrank {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="simulate inducts into a training or eval dataset")
    _common(p)
    p.add_argument("--policy", choices=("center", "random"), default="center")
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--fail-fraction", type=float, default=0.151,
                   help="failure share after oversampling (default 0.151)")
    p.add_argument("--drift", type=float, help="label with a drifted past oracle of this magnitude")
    p.add_argument("--eval", action="store_true", help="plain stream prefix, no oversampling")
    p.add_argument("--oracle", help="oracle.json to label with (default: calibrate from config)")
    p.add_argument("--name", help="dataset name (default: the policy)")

    p = sub.add_parser("train", help="train a boosted-tree ensemble or single model")
    _common(p)
    p.add_argument("--data", action="append", required=True, help="dataset file (repeatable)")
    p.add_argument("--members", type=int, default=5, help="5 for the ensemble, 1 for one model")

    p = sub.add_parser("eval", help="ROC-AUC with bootstrap intervals on eval datasets")
    _common(p)
    p.add_argument("--model", help="model.json")
    p.add_argument("--data", action="append", required=True, help="eval dataset (repeatable)")
    p.add_argument("--baseline", choices=("always-success",), help="add a constant-score row")
    p.add_argument("--ceiling", action="store_true", help="add a row scored by the true probability")
    p.add_argument("--resamples", type=int, default=1000, help="bootstrap resamples")

    p = sub.add_parser("ab", help="paired multi-arm scene-clearing experiment",
                       epilog=f"arms: {', '.join(ARMS)} or rankers {GRAMMAR}")
    _common(p)
    p.add_argument("--arms", required=True, help="comma-separated arm names or ranker strings")
    p.add_argument("--scenes", type=int, default=2000)
    p.add_argument("--model", action="append",
                   help="model.json for all learned arms, or ARM=model.json (repeatable)")
    p.add_argument("--oracle", help="oracle.json (default: calibrate from config)")
    p.add_argument("--episodes", action="store_true", help="also write episodes.jsonl")

    p = sub.add_parser("inspect", help="dump one scene: heightmap, graph and ranked picks")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene-seed", type=int)
    src.add_argument("--scene", help="scene JSON file")
    p.add_argument("--ranker", default="topo+z/center", help=f"arm name or ranker {GRAMMAR}")
    p.add_argument("--model", help="model.json (needed by learned rankers)")
    p.add_argument("--oracle", help="oracle.json, adds true probabilities to the table")
    return parser


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "ab": cmd_ab,
    "inspect": cmd_inspect,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
