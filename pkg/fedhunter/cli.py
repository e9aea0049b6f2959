# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import torch

from fedhunter import (
    __version__,
    decision_quality,
    detectors,
    explainer,
    federated,
    netflow_ingest,
    neural_core,
    provenance_graph,
    synthetic,
    utils,
    visualizer,
)
from fedhunter.errors import ConfigError, DataError, FedHunterError, KindError

logger = logging.getLogger(__name__)


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, output):
        path = f"{output}.manifest.json"
        utils.write_json(path, asdict(self), indent=2)
        return path


def _input_paths(args):
    names = ("input", "train", "test", "data", "checkpoint", "config", "quality", "background")
    return {n: getattr(args, n) for n in names if getattr(args, n, None)}


def _config_of(args):
    skip = {"func", "log_level", "argv"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_data(kind, path):
    try:
        if kind == "e_graphsage":
            return provenance_graph.load_graph(path)
        return netflow_ingest.load_features(path)
    except KindError as e:
        raise KindError(f"a {kind} model cannot read {path}: {e}") from e


def _instance(model, data, args):
    if isinstance(model, detectors.EGraphSageModel):
        if not args.edge_id:
            raise ConfigError("the graph detector needs --edge-id")
        data.find_edge(args.edge_id)
        return detectors.EdgeSelection(data, [args.edge_id])
    if args.instance_index is None:
        raise ConfigError("the flow detector needs --instance-index")
    if not 0 <= args.instance_index < len(data):
        raise DataError(f"instance index {args.instance_index} outside [0, {len(data)})")
    return data[args.instance_index]


def _dot_path(output):
    return os.path.splitext(output)[0] + ".dot"


def cmd_preprocess(args):
    if args.dot and args.kind != "provenance":
        raise ConfigError("--dot exports provenance graphs only")
    outputs = [args.output]
    if args.kind == "netflow":
        data = netflow_ingest.ingest_csv(
            args.input, args.schema, strict=args.strict, clamp=args.clamp, drop_ports=args.drop_ports
        )
        save = netflow_ingest.save_features
        split = netflow_ingest.stratified_split
    else:
        data = provenance_graph.load_events(args.input, two_pass=not args.single_pass)
        save = provenance_graph.save_graph
        split = provenance_graph.split_edges
    if args.dot:
        outputs.append(visualizer.to_dot(data, args.dot))
    if args.test_output:
        train, test = split(data, args.split, seed=args.seed)
        save(args.output, train)
        save(args.test_output, test)
        outputs.append(args.test_output)
    else:
        save(args.output, data)
    return outputs


def cmd_train(args):
    overrides = dict(
        clients=args.clients,
        rounds=args.rounds,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        model=args.model,
    )
    if args.config:
        config = federated.FederatedConfig.from_json(args.config, **overrides)
    else:
        config = federated.FederatedConfig.from_dict({}, **overrides)
    kind = detectors.canonical_kind(config.model)
    train = _load_data(kind, args.train)
    test = _load_data(kind, args.test) if args.test else None
    checkpoint, logs = federated.run_federated(config, kind, train, test)
    model = neural_core.from_checkpoint(checkpoint)
    neural_core.save_checkpoint(model, args.output)
    round_log = args.round_log or f"{args.output}.rounds.jsonl"
    federated.write_round_logs(round_log, logs)
    if logs and logs[-1].report is not None:
        print(utils.dumps(logs[-1].report.to_dict(), indent=2), flush=True)
    return [args.output, round_log]


def cmd_evaluate(args):
    model = neural_core.load_checkpoint(args.checkpoint)
    report = detectors.evaluate(model, _load_data(model.model_kind, args.data), args.threshold)
    print(utils.dumps(report.to_dict(), indent=2), flush=True)
    if args.output:
        utils.write_json(args.output, report.to_dict(), indent=2)
        return [args.output]
    return []


def cmd_explain(args):
    model = neural_core.load_checkpoint(args.checkpoint)
    data = _load_data(model.model_kind, args.data)
    if args.method == "gradient-shap" and isinstance(model, detectors.EGraphSageModel):
        if not args.edge_id:
            raise ConfigError("the graph detector needs --edge-id")
        config = explainer.GradientShapConfig(samples=args.samples, mode=args.mode, seed=args.seed)
        explanation = explainer.explain_edge(model, data, args.edge_id, args.hops, config)
        utils.write_json(args.output, explanation.to_dict(), indent=2)
        dot = visualizer.explanation_to_dot(explanation, _dot_path(args.output))
        return [args.output, dot]

    if isinstance(model, detectors.EGraphSageModel):
        raise ConfigError(f"{args.method} explains flow detections only, use gradient-shap for graphs")
    background_data = netflow_ingest.load_features(args.background) if args.background else data
    background = explainer.sample_background(background_data, args.background_size, args.seed)
    if args.method == "summary":
        subsets = decision_quality.split_by_category(model, data, args.threshold)
        frame = explainer.summarize_categories(
            model,
            {c.value: s for c, s in subsets.items()},
            background,
            per_class=args.per_class,
            seed=args.seed,
            coalition_budget=args.budget,
        )
        utils.atomic_write_text(args.output, frame.to_csv(index=False, float_format="%.17g"))
        return [args.output]
    explanation = explainer.explain_flow(
        model,
        _instance(model, data, args),
        background,
        method=args.method,
        coalition_budget=args.budget,
        seed=args.seed,
        samples=args.samples,
        mode=args.mode,
    )
    utils.write_json(args.output, explanation.to_dict(), indent=2)
    return [args.output]


def cmd_quality(args):
    if args.action == "export":
        quality_set = decision_quality.load_quality_dataset(args.quality)
        decision_quality.export_embeddings(quality_set, args.output)
        return [args.output]

    model = neural_core.load_checkpoint(args.checkpoint)
    data = _load_data(model.model_kind, args.data)
    if args.action == "build":
        subsets = decision_quality.split_by_category(model, data, args.threshold)
        quality_set = decision_quality.build_quality_dataset(model, subsets, args.per_class, args.seed)
        decision_quality.save_quality_dataset(args.output, quality_set)
        sizes = {c.value: n for c, n in quality_set.sizes().items()}
        print(utils.dumps(sizes), flush=True)
        return [args.output]

    quality_set = decision_quality.load_quality_dataset(args.quality)
    if args.action == "check":
        result = decision_quality.check_decision(
            model, _instance(model, data, args), quality_set, args.metric
        )
    else:
        result = decision_quality.evaluate_checker(
            model, quality_set, data, args.threshold, args.metric
        )
    print(utils.dumps(result.to_dict(), indent=2), flush=True)
    if args.output:
        utils.write_json(args.output, result.to_dict(), indent=2)
        return [args.output]
    return []


def cmd_synth(args):
    if args.kind == "netflow":
        records = synthetic.generate_flows(args.n, args.separation, args.attack_rate, args.seed)
        synthetic.write_flows_csv(args.output, records)
    else:
        events = synthetic.generate_provenance(args.nodes, args.edges, args.attack_rate, args.seed)
        synthetic.write_events(args.output, events)
    return [args.output]


def cmd_replay(args):
    manifest = utils.read_json(args.manifest)
    if "argv" not in manifest:
        raise DataError(f"{args.manifest}: not a run manifest")
    logger.info(f"Replaying {' '.join(manifest['argv'])}")
    return main(manifest["argv"])


def _add_common(p, *names):
    for name in names:
        if name == "checkpoint":
            p.add_argument("--checkpoint", required=True)
        elif name == "data":
            p.add_argument("--data", required=True, help="feature file or graph archive")
        elif name == "seed":
            p.add_argument("--seed", type=int, default=0)
        elif name == "threshold":
            p.add_argument("--threshold", type=float, default=detectors.DEFAULT_THRESHOLD)
        elif name == "instance":
            p.add_argument("--instance-index", type=int, default=None)
            p.add_argument("--edge-id", default=None)


def build_parser():
    # fmt: off
    parser = argparse.ArgumentParser(prog="fedhunter", description="Federated intrusion detection with explanations")
    parser.add_argument(
        '-d', '--debug',
        help="Log debugging statements",
        action="store_const", dest="log_level", const=logging.DEBUG,
        default=logging.WARNING,
    )
    parser.add_argument(
        '-v', '--verbose',
        help="Log verbose info",
        action="store_const", dest="log_level", const=logging.INFO,
    )
    # fmt: on
    commands = parser.add_subparsers(dest="command", required=True)

    preprocess = commands.add_parser("preprocess", help="normalize flows or build a provenance graph")
    preprocess.add_argument("kind", choices=["netflow", "provenance"])
    preprocess.add_argument("--input", required=True)
    preprocess.add_argument("--output", required=True)
    preprocess.add_argument("--test-output", default=None, help="also write a stratified test split")
    preprocess.add_argument("--split", type=float, default=0.7, help="training fraction")
    preprocess.add_argument("--schema", default="nf-ton-iot", choices=sorted(netflow_ingest.SCHEMAS))
    preprocess.add_argument("--strict", action="store_true")
    preprocess.add_argument("--clamp", action="store_true")
    preprocess.add_argument("--drop-ports", action="store_true")
    preprocess.add_argument("--single-pass", action="store_true")
    preprocess.add_argument("--dot", default=None, help="also write the provenance graph as DOT")
    _add_common(preprocess, "seed")
    preprocess.set_defaults(func=cmd_preprocess)

    train = commands.add_parser("train", help="federated training")
    train.add_argument("--model", default=None, choices=["cnn-gru", "e-graphsage"])
    train.add_argument("--train", required=True)
    train.add_argument("--test", default=None)
    train.add_argument("--output", required=True)
    train.add_argument("--round-log", default=None)
    train.add_argument("--config", default=None, help="JSON file {clients, rounds, epochs, batch_size, lr, seed, model}")
    train.add_argument("--clients", type=int, default=None)
    train.add_argument("--rounds", type=int, default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.set_defaults(func=cmd_train)

    evaluate = commands.add_parser("evaluate", help="detection metrics on labeled data")
    _add_common(evaluate, "checkpoint", "data", "threshold")
    evaluate.add_argument("--output", default=None)
    evaluate.set_defaults(func=cmd_evaluate)

    explain = commands.add_parser("explain", help="Shapley value explanations")
    explain.add_argument("method", choices=["exact", "kernel-shap", "gradient-shap", "summary"])
    _add_common(explain, "checkpoint", "data", "instance", "seed", "threshold")
    explain.add_argument("--output", required=True)
    explain.add_argument("--background", default=None, help="feature file, defaults to --data")
    explain.add_argument("--background-size", type=int, default=100)
    explain.add_argument("--budget", type=int, default=explainer.DEFAULT_COALITION_BUDGET)
    explain.add_argument("--samples", type=int, default=50)
    explain.add_argument("--mode", default="expected_gradients", choices=[m.value for m in explainer.GradientMode])
    explain.add_argument("--hops", type=int, default=1)
    explain.add_argument("--per-class", type=int, default=100)
    explain.set_defaults(func=cmd_explain)

    quality = commands.add_parser("quality", help="decision quality checking")
    quality.add_argument("action", choices=["build", "check", "evaluate", "export"])
    quality.add_argument("--checkpoint", default=None)
    quality.add_argument("--data", default=None)
    quality.add_argument("--quality", default=None, help="quality dataset JSON")
    quality.add_argument("--output", default=None)
    quality.add_argument("--per-class", type=int, default=decision_quality.DEFAULT_PER_CLASS)
    quality.add_argument("--metric", default=decision_quality.DEFAULT_METRIC)
    _add_common(quality, "instance", "seed", "threshold")
    quality.set_defaults(func=cmd_quality)

    synth = commands.add_parser("synth", help="generate synthetic datasets")
    synth.add_argument("kind", choices=["netflow", "provenance"])
    synth.add_argument("--output", required=True)
    synth.add_argument("--n", type=int, default=1000, help="number of flows")
    synth.add_argument("--separation", type=float, default=0.5)
    synth.add_argument("--nodes", type=int, default=1000)
    synth.add_argument("--edges", type=int, default=None, help="number of events, defaults to twice the nodes")
    synth.add_argument("--attack-rate", type=float, default=None)
    _add_common(synth, "seed")
    synth.set_defaults(func=cmd_synth)

    replay = commands.add_parser("replay", help="rerun the command recorded in a manifest")
    replay.add_argument("--manifest", required=True)
    replay.set_defaults(func=cmd_replay)
    return parser


def _check_args(parser, args):
    required = {
        ("quality", "build"): ("checkpoint", "data", "output"),
        ("quality", "check"): ("checkpoint", "data", "quality"),
        ("quality", "evaluate"): ("checkpoint", "data", "quality"),
        ("quality", "export"): ("quality", "output"),
    }
    key = (args.command, getattr(args, "action", None))
    missing = [f"--{n}" for n in required.get(key, ()) if not getattr(args, n)]
    if missing:
        parser.error(f"quality {args.action} requires {', '.join(missing)}")
    if args.command == "synth" and args.attack_rate is None:
        args.attack_rate = 0.5 if args.kind == "netflow" else 0.007


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_args(parser, args)
    except SystemExit as e:
        return e.code
    logging.basicConfig(level=args.log_level)
    # Single threaded kernels keep artifacts identical across machines
    torch.set_num_threads(1)

    start = time.perf_counter()
    try:
        result = args.func(args)
    except FedHunterError as e:
        logger.error(str(e))
        print(f"fedhunter: error: {e}", file=sys.stderr, flush=True)
        return e.exit_code
    except OSError as e:
        print(f"fedhunter: error: {e}", file=sys.stderr, flush=True)
        return DataError.exit_code

    if args.command == "replay":
        return result
    if result:
        manifest = RunManifest(
            command=args.command,
            argv=argv,
            config=_config_of(args),
            seed=getattr(args, "seed", None),
            inputs=_input_paths(args),
            outputs=list(result),
            duration_s=time.perf_counter() - start,
        )
        manifest.write(result[0])
    return 0


if __name__ == "__main__":
    sys.exit(main())
