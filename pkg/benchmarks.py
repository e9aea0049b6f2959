# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import logging
import time
import traceback
from collections import OrderedDict

import pandas as pd

import torch

from fedhunter import federated, netflow_ingest, provenance_graph, synthetic, utils

logger = logging.getLogger(__name__)


class Benchmark:
    def load_data(self, scenario, size, attack_rate, seed=0):
        if scenario == "cnn-gru":
            records = synthetic.generate_flows(size, separation=0.2, attack_rate=attack_rate, seed=seed)
            vectors = [netflow_ingest.normalize_record(r) for r in records]
            return netflow_ingest.stratified_split(vectors, 0.7, seed=seed)
        elif scenario == "e-graphsage":
            events = synthetic.generate_provenance(
                size // 2, edges=size, attack_rate=attack_rate, seed=seed
            )
            lines = [utils.dumps(e) for e in events]
            graph = provenance_graph.build_graph(lines, name="synthetic")
            return provenance_graph.split_edges(graph, 0.7, seed=seed)
        raise ValueError(f"unknown scenario {scenario}")

    def run(self, scenario, clients, rounds, size, attack_rate, seed=0, epochs=None):
        train, test = self.load_data(scenario, size, attack_rate, seed)
        config = federated.FederatedConfig(
            clients=clients, rounds=rounds, epochs=epochs, seed=seed, model=scenario
        )
        start = time.perf_counter()
        _, logs = federated.run_federated(config, scenario, train, test)
        return logs[-1].report, time.perf_counter() - start


# Desk-scale stand-ins for the full-dataset experiments: the size is a number of
# flows or of provenance edges.
SCENARIOS = {
    "cnn-gru": {"clients": 3, "rounds": 5, "size": 20000, "attack_rate": 0.5},
    "e-graphsage": {"clients": 1, "rounds": 1, "size": 10000, "attack_rate": 0.007},
}

import argparse

# fmt: off
parser = argparse.ArgumentParser(description="fedhunter detection benchmarks")
parser.add_argument("-s", "--scenario", "--scenarios", nargs="+", type=str, choices=SCENARIOS.keys(), default=list(SCENARIOS.keys()))
parser.add_argument("--clients", type=int, default=None)
parser.add_argument("--rounds", type=int, default=None)
parser.add_argument("--size", type=int, default=None, help="number of flows or provenance edges")
parser.add_argument("--epochs", type=int, default=None)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")

parser.add_argument("--log-path", "--log_path", default="/tmp/fedhunter_benchmarks.csv")
parser.add_argument("--append-log", action="store_true")
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

if __name__ == "__main__":
    args = parser.parse_args()
    logging.basicConfig(level=args.log_level)
    print(f"Running with args {args}")
    if args.threads:
        torch.set_num_threads(args.threads)

    b = Benchmark()
    results = []

    for scenario in args.scenario:
        settings = dict(SCENARIOS[scenario])
        for key in ("clients", "rounds", "size"):
            if getattr(args, key) is not None:
                settings[key] = getattr(args, key)
        result = OrderedDict([("scenario", scenario)] + list(settings.items()))
        print(
            f"\nRUNNING {scenario} WITH {settings['clients']} CLIENTS FOR {settings['rounds']} ROUNDS ON {settings['size']} SAMPLES",
            flush=True,
        )
        try:
            report, duration = b.run(
                scenario,
                settings["clients"],
                settings["rounds"],
                settings["size"],
                settings["attack_rate"],
                seed=args.seed,
                epochs=args.epochs,
            )
            print(
                f"  ACCURACY {report.accuracy:.4f}, PRECISION {report.precision}, RECALL {report.recall}, F1 {report.f1} IN {duration:.1f}s",
                flush=True,
            )
            result["time"] = duration
            result.update(report.to_dict()["metrics"])
            result.update(report.counts.to_dict())
        except Exception as e:
            print(f"  FAILED TO RUN {scenario}:\n{traceback.format_exc()}", flush=True)
            result["error"] = str(e).replace("\n", " ")

        # Log result
        results.append(result)
        pd.DataFrame(results).fillna("").to_csv(
            args.log_path,
            mode="a" if args.append_log else "w",
            header=not args.append_log,
            index=False,
            float_format="%.4g",
        )
