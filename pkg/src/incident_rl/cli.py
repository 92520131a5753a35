"""Command-line entry point: ``incident-rl <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .agents import (ALGORITHMS, NoActions, Policy, QTable, SearchConfig, TrainConfig,
                     Hyperparams, UnreachableAction, fixed_policy, grid_search,
                     most_frequent_policy, random_policy, train)
from .event_log import LogFormatConfig, LogParseError, read_log, validate_log, write_log
from .evaluate import (REWARD_HEADER, EmptySample, RewardSample, RolloutBatchConfig,
                       aligned_table, evaluation_report, reward_rows,
                       rollout, variants_csv)
from .mdp import (EmptyCorpus, MdpEstimator, SchemaError, format_counts, load_mdp,
                  save_mdp)
from .parallel import default_workers
from .preprocess import (SegmentationConfig, filter_min_length, preprocess,
                         read_episodes, write_episodes)
from .stats import DegenerateInput, format_comparison, one_way_anova, tukey_hsd
from .synth import GeneratorConfig, generate_log, load_generator_config

logger = logging.getLogger("incident_rl")

VALIDATION_ERRORS = (LogParseError, SchemaError, UnreachableAction, NoActions, EmptyCorpus,
                     DegenerateInput, EmptySample, ValueError, KeyError, OSError)

POLICY_LABELS = {"random": "Random", "frequent": "Most frequent action",
                 "qlearning": "Q-learning", "sarsa": "SARSA"}


class Usage(Exception):
    pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_path, subcommand: str, args: argparse.Namespace, inputs, started: str):
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {
        "subcommand": subcommand,
        "flags": json.loads(json.dumps(flags, default=str)),
        "inputs": {str(p): _digest(p) for p in inputs if p and Path(p).is_file()},
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _save_json(path, obj) -> None:
    _write(path, json.dumps(obj, indent=2) + "\n")


# subcommands -----------------------------------------------------------

def cmd_preprocess(args) -> int:
    started = _now()
    log = read_log(args.log, LogFormatConfig(delimiter=args.delimiter))
    for line in validate_log(log).lines():
        logger.info(line)
    cfg = SegmentationConfig(args.gap_days, args.min_length, args.resolution)
    episodes, report = preprocess(log, cfg)
    write_episodes(episodes, args.out)
    _write(f"{args.out}.summary.txt", "\n".join(report.lines()) + "\n")
    write_manifest(args.out, "preprocess", args, [args.log], started)
    print("\n".join(report.lines()))
    return 0


def cmd_build_mdp(args) -> int:
    started = _now()
    episodes = read_episodes(args.episodes)
    est = MdpEstimator(initial=args.initial).fit(episodes)
    save_mdp(est.mdp_, args.out)
    _write(args.counts or f"{args.out}.counts.csv", format_counts(est.counts_))
    write_manifest(args.out, "build-mdp", args, [args.episodes], started)
    return 0


def cmd_train(args) -> int:
    started = _now()
    mdp = load_mdp(args.mdp)
    q = train(mdp, args.algo, Hyperparams(args.alpha, args.gamma, args.epsilon),
              TrainConfig(args.episodes, args.seed, args.max_steps))
    _save_json(args.out, q.to_dict())
    write_manifest(args.out, "train", args, [args.mdp], started)
    if q.n_truncated:
        logger.warning("%d training episodes hit the step cap", q.n_truncated)
    return 0


def _search_config(args) -> SearchConfig:
    return SearchConfig(n_repeats=args.repeats, n_eval_runs=args.eval_runs,
                        eval_episodes=args.eval_episodes, train_episodes=args.train_episodes,
                        max_steps=args.max_steps, evaluation=args.evaluation,
                        eval_policy=args.eval_policy, seed=args.seed)


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "parameter", "alpha", "gamma", "epsilon", "score", "score_sd"])
    for row in trace:
        w.writerow([row["stage"], row["parameter"], row["alpha"], row["gamma"], row["epsilon"],
                    repr(row["score"]), repr(row["score_sd"])])
    return buf.getvalue()


def cmd_tune(args) -> int:
    started = _now()
    mdp = load_mdp(args.mdp)
    hp, trace = grid_search(mdp, args.algo, _search_config(args), args.threads)
    _write(args.out, trace_csv(trace))
    _save_json(f"{args.out}.best.json", {"algorithm": args.algo, "alpha": hp.alpha,
                                         "gamma": hp.gamma, "epsilon": hp.epsilon})
    write_manifest(args.out, "tune", args, [args.mdp], started)
    print(f"{args.algo}: alpha={hp.alpha} gamma={hp.gamma} epsilon={hp.epsilon}")
    return 0


def check_policy_spec(spec: list[str]) -> None:
    kind = spec[0]
    if kind not in ("random", "frequent", "qtable", "fixed"):
        raise Usage(f"unknown policy kind {kind!r}; use random, frequent, qtable or fixed")
    if kind == "random" and len(spec) != 1:
        raise Usage("--policy random takes no file")
    if kind != "random" and len(spec) != 2:
        raise Usage(f"--policy {kind} needs exactly one file")


def load_policy(spec: list[str], mdp) -> Policy:
    check_policy_spec(spec)
    kind = spec[0]
    if kind == "random":
        return random_policy(mdp, POLICY_LABELS["random"])
    path = spec[1]
    if kind == "frequent":
        return most_frequent_policy(read_episodes(path), name=POLICY_LABELS["frequent"])
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if kind == "qtable":
        if doc.get("format") == "incident-rl/qtable":
            q = QTable.from_dict(doc)
            return q.greedy_policy(POLICY_LABELS.get(q.algorithm, q.algorithm))
        return Policy.from_dict(doc)
    if "choices" in doc:
        return Policy.from_dict(doc)
    return fixed_policy(doc["actions"], doc.get("name", "fixed"))


def run_evaluation(mdp, policy, cfg: RolloutBatchConfig, prefix, top_k: int, workers: int,
                   keep_episode_rewards: bool = False):
    res = rollout(mdp, policy, cfg, workers, keep_episode_rewards=keep_episode_rewards)
    res.sample.save(f"{prefix}.sample.json")
    _write(f"{prefix}.variants.csv", variants_csv(res.variants))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "average_reward_per_episode", "average_reward_per_run",
                "standard_error", "runs", "episodes_per_run", "truncated"])
    s = res.sample
    w.writerow([s.policy, repr(s.average), repr(s.average * s.episodes_per_run),
                repr(s.standard_error), len(s), s.episodes_per_run, s.n_truncated])
    _write(f"{prefix}.rewards.csv", buf.getvalue())
    text = evaluation_report(res, top_k)
    _write(f"{prefix}.report.txt", text)
    return res, text


def cmd_evaluate(args) -> int:
    started = _now()
    check_policy_spec(args.policy)
    mdp = load_mdp(args.mdp)
    policy = load_policy(args.policy, mdp)
    cfg = RolloutBatchConfig(args.runs, args.episodes_per_run, args.seed, args.max_steps)
    _, text = run_evaluation(mdp, policy, cfg, args.out, args.top_k, args.threads,
                             args.keep_episode_rewards)
    write_manifest(args.out, "evaluate", args, [args.mdp, *args.policy[1:]], started)
    print(text, end="")
    return 0


def compare_samples(samples: list[RewardSample], alpha: float, level: str) -> str:
    if len(samples) < 2:
        raise Usage("compare needs at least two reward samples")
    if level == "episode":
        if any(s.episode_rewards is None for s in samples):
            raise ValueError("episode-level comparison needs samples saved with episode rewards")
        groups = {s.policy: s.episode_rewards for s in samples}
    else:
        groups = {s.policy: s.run_means for s in samples}
    return format_comparison(one_way_anova(groups), tukey_hsd(groups, alpha))


def cmd_compare(args) -> int:
    started = _now()
    samples = [RewardSample.load(p) for p in args.samples]
    text = compare_samples(samples, args.alpha, args.level)
    if args.out:
        _write(args.out, text)
        write_manifest(args.out, "compare", args, args.samples, started)
    print(text, end="")
    return 0


def render_report(directory) -> str:
    """Human-readable summary of one analysis directory written by ``pipeline``."""
    d = Path(directory)
    samples = []
    for key in ("random", "frequent", "qlearning", "sarsa"):
        p = d / f"eval_{key}.sample.json"
        if p.exists():
            samples.append((key, RewardSample.load(p)))
    if not samples:
        raise ValueError(f"no eval_*.sample.json files in {d}")
    out = [f"== {d.name} ==", ""]
    summary = d / "episodes.csv.summary.txt"
    if summary.exists():
        out += ["Preprocessing", summary.read_text(encoding="utf-8").rstrip(), ""]

    hp_rows = []
    for algo in ALGORITHMS:
        p = d / f"tune_{algo}.csv.best.json"
        if p.exists():
            hp = json.loads(p.read_text(encoding="utf-8"))
            hp_rows.append((POLICY_LABELS[algo], hp["alpha"], hp["gamma"], hp["epsilon"]))
    if hp_rows:
        out += ["Tuned hyperparameters",
                aligned_table(("Agent", "alpha", "gamma", "epsilon"), hp_rows), ""]

    out += ["Average reward per policy",
            aligned_table(REWARD_HEADER, reward_rows([s for _, s in samples])), ""]

    pol_path = d / "policies.json"
    if pol_path.exists():
        pols = json.loads(pol_path.read_text(encoding="utf-8"))
        states = [s for s in ("va", "sib", "pp", "po") if any(s in p for p in pols.values())]
        rows = [(name, *(p.get(s, "-") for s in states)) for name, p in pols.items()]
        out += ["Derived policies", aligned_table(("Policy", *(s.upper() for s in states)), rows), ""]

    for key, s in samples:
        vpath = d / f"eval_{key}.variants.csv"
        if not vpath.exists():
            continue
        with open(vpath, encoding="utf-8", newline="") as fh:
            rows = [(r["variant"], r["frequency"]) for r in csv.DictReader(fh)][:5]
        out += [f"Five most common variants: {s.policy}",
                aligned_table(("Path", "Frequency"), rows), ""]

    cmp_path = d / "compare.txt"
    if cmp_path.exists():
        out += ["Statistical comparison", cmp_path.read_text(encoding="utf-8").rstrip(), ""]
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    text = "\n".join(render_report(d) for d in args.dirs)
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def cmd_synth_gen(args) -> int:
    started = _now()
    cfg = load_generator_config(args.config) if args.config else GeneratorConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    log, truth = generate_log(cfg)
    write_log(log, args.out)
    truth.save(args.truth)
    write_manifest(args.out, "synth-gen", args, [args.config], started)
    print(json.dumps(truth.tallies))
    return 0


def _analysis(log, out: Path, args, min_length: int) -> str:
    out.mkdir(parents=True, exist_ok=True)
    episodes, report = preprocess(log, SegmentationConfig(args.gap_days, 1, args.resolution))
    if min_length > 1:
        kept = filter_min_length(episodes, min_length)
        report.add(f"min_length_{min_length}", episodes, kept)
        episodes = kept
    if not episodes:
        raise EmptyCorpus(f"no episodes left for {out.name}")
    write_episodes(episodes, out / "episodes.csv")
    _write(out / "episodes.csv.summary.txt", "\n".join(report.lines()) + "\n")

    est = MdpEstimator(initial=args.initial).fit(episodes)
    mdp = est.mdp_
    save_mdp(mdp, out / "mdp.json")
    _write(out / "mdp.json.counts.csv", format_counts(est.counts_))

    search = _search_config(args)
    policies = {"frequent": most_frequent_policy(episodes, name=POLICY_LABELS["frequent"]),
                "random": random_policy(mdp, POLICY_LABELS["random"])}
    for algo in ALGORITHMS:
        hp, trace = grid_search(mdp, algo, search, args.threads)
        _write(out / f"tune_{algo}.csv", trace_csv(trace))
        _save_json(out / f"tune_{algo}.csv.best.json",
                   {"algorithm": algo, "alpha": hp.alpha, "gamma": hp.gamma, "epsilon": hp.epsilon})
        q = train(mdp, algo, hp, TrainConfig(args.train_episodes, args.seed, args.max_steps))
        _save_json(out / f"qtable_{algo}.json", q.to_dict())
        policies[algo] = q.greedy_policy(POLICY_LABELS[algo])
    _save_json(out / "policies.json",
               {policies[k].name: policies[k].as_mapping() for k in ("frequent", "qlearning", "sarsa")})

    cfg = RolloutBatchConfig(args.runs, args.episodes_per_run, args.seed, args.max_steps)
    samples = {}
    for key in ("random", "frequent", "qlearning", "sarsa"):
        res, _ = run_evaluation(mdp, policies[key], cfg, out / f"eval_{key}", args.top_k,
                                args.threads, args.level == "episode")
        samples[key] = res.sample
    # random is only a floor; the comparison covers the three candidate policies
    _write(out / "compare.txt", compare_samples([samples[k] for k in ("frequent", "qlearning", "sarsa")],
                                                args.alpha, args.level))
    text = render_report(out)
    _write(out / "report.txt", text)
    return text


def cmd_pipeline(args) -> int:
    started = _now()
    out = Path(args.out_dir)
    log = read_log(args.log, LogFormatConfig(delimiter=args.delimiter))
    parts = [_analysis(log, out / "full", args, 1)]
    if args.subset_min_length > 1:
        parts.append(_analysis(log, out / f"subset_min{args.subset_min_length}", args,
                               args.subset_min_length))
    text = "\n".join(parts)
    _write(out / "report.txt", text)
    write_manifest(out / "report.txt", "pipeline", args, [args.log], started)
    print(text, end="")
    return 0


# argument parsing ------------------------------------------------------

def _add_search(p):
    p.add_argument("--repeats", type=int, default=10, help="training runs per candidate")
    p.add_argument("--eval-runs", type=int, default=100)
    p.add_argument("--eval-episodes", type=int, default=2000)
    p.add_argument("--train-episodes", type=int, default=2000)
    p.add_argument("--evaluation", choices=("simulate", "exact"), default="simulate")
    p.add_argument("--eval-policy", choices=("greedy", "epsilon_greedy"), default="greedy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incident-rl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="INI file; one section per subcommand")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=default_workers())
        p.add_argument("--max-steps", type=int, default=1000)
        p.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        return p

    p = add("preprocess", cmd_preprocess, "event log -> episodes")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--gap-days", type=int, default=9)
    p.add_argument("--min-length", type=int, default=1)
    p.add_argument("--resolution", choices=("corpus", "state"), default="corpus")

    p = add("build-mdp", cmd_build_mdp, "episodes -> MDP file")
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts")
    p.add_argument("--initial", choices=("empirical", "uniform"), default="empirical")

    p = add("train", cmd_train, "train one agent")
    p.add_argument("--mdp", required=True)
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=0.2)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = add("tune", cmd_tune, "sequential grid search")
    p.add_argument("--mdp", required=True)
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--out", required=True)
    _add_search(p)

    p = add("evaluate", cmd_evaluate, "roll out a policy")
    p.add_argument("--mdp", required=True)
    p.add_argument("--policy", nargs="+", required=True, metavar="KIND [FILE]",
                   help="random | frequent EPISODES | qtable FILE | fixed FILE")
    p.add_argument("--runs", type=int, default=10_000)
    p.add_argument("--episodes-per-run", type=int, default=100)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--keep-episode-rewards", action="store_true")
    p.add_argument("--out", required=True, help="output prefix")

    p = add("compare", cmd_compare, "ANOVA + Tukey HSD over reward samples")
    p.add_argument("samples", nargs="+")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--level", choices=("run", "episode"), default="run")
    p.add_argument("--out")

    p = add("report", cmd_report, "render report(s) from pipeline directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out")

    p = add("synth-gen", cmd_synth_gen, "generate a synthetic incident log")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(seed=None)

    p = add("pipeline", cmd_pipeline, "full flow on the whole corpus and the long-episode subset")
    p.add_argument("--log", required=True)
    p.add_argument("--out-dir", default="incident_rl_results")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--gap-days", type=int, default=9)
    p.add_argument("--resolution", choices=("corpus", "state"), default="corpus")
    p.add_argument("--initial", choices=("empirical", "uniform"), default="empirical")
    p.add_argument("--subset-min-length", type=int, default=3)
    p.add_argument("--runs", type=int, default=10_000)
    p.add_argument("--episodes-per-run", type=int, default=100)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--level", choices=("run", "episode"), default="run")
    _add_search(p)
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config, encoding="utf-8"):
        raise Usage(f"cannot read config file {known.config}")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        if not cp.has_section(name):
            continue
        dests = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in cp.items(name):
            dest = key.replace("-", "_")
            if dest not in dests:
                raise Usage(f"unknown key {key!r} in section [{name}]")
            act = dests[dest]
            if isinstance(act, argparse._StoreTrueAction):
                defaults[dest] = cp.getboolean(name, key)
            else:
                defaults[dest] = act.type(raw) if act.type else raw
        sp.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except Usage as e:
        parser.print_usage(sys.stderr)
        print(f"incident-rl: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        args.threads = 1
    try:
        return args.func(args)
    except Usage as e:
        parser.print_usage(sys.stderr)
        print(f"incident-rl: error: {e}", file=sys.stderr)
        return 2
    except LogParseError as e:
        for err in e.errors:
            print(str(err), file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
