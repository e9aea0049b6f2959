# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import json
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from io import StringIO
from unittest import mock

from fedhunter import cli, detectors, netflow_ingest, provenance_graph
from fedhunter.errors import KindError, TrainingError
from fedhunter.native_graphs import simple_graph
from fedhunter.netflow_ingest import FeatureVector


def run(*argv):
    with redirect_stdout(StringIO()), redirect_stderr(StringIO()):
        return cli.main([str(a) for a in argv])


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.csv = cls.path("flows.csv")
        cls.train = cls.path("train.json")
        cls.test = cls.path("test.json")
        cls.model = cls.path("model.json")
        assert run("synth", "netflow", "--n", 200, "--seed", 1, "--output", cls.csv) == 0
        assert run("preprocess", "netflow", "--input", cls.csv, "--output", cls.train, "--test-output", cls.test) == 0
        cls.train_argv = [
            "train", "--train", cls.train, "--test", cls.test, "--output", cls.model,
            "--clients", 2, "--rounds", 2, "--epochs", 2, "--batch-size", 32, "--seed", 0,
        ]
        assert run(*cls.train_argv) == 0

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    @classmethod
    def path(cls, name):
        return os.path.join(cls.tmp, name)

    def testPreprocessSplit(self):
        with open(self.train) as f:
            train = json.load(f)
        with open(self.test) as f:
            test = json.load(f)
        self.assertEqual(len(train) + len(test), 200)
        self.assertEqual(len(train), 140)
        self.assertEqual(len(train[0]["values"]), 10)

    def testTrainArtifacts(self):
        with open(self.model) as f:
            checkpoint = json.load(f)
        self.assertEqual(checkpoint["model_kind"], "cnn_gru")
        self.assertEqual(checkpoint["metadata"]["round"], 2)
        with open(self.model + ".rounds.jsonl") as f:
            self.assertEqual(len(f.readlines()), 2)
        with open(self.model + ".manifest.json") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["command"], "train")
        self.assertEqual(manifest["outputs"][0], self.model)
        self.assertEqual(manifest["inputs"]["train"], self.train)

    def testRerunIsByteIdentical(self):
        again = self.path("model_again.json")
        argv = list(self.train_argv)
        argv[argv.index(self.model)] = again
        self.assertEqual(run(*argv), 0)
        self.assertEqual(read_bytes(again), read_bytes(self.model))
        other = self.path("flows_again.csv")
        self.assertEqual(run("synth", "netflow", "--n", 200, "--seed", 1, "--output", other), 0)
        self.assertEqual(read_bytes(other), read_bytes(self.csv))

    def testReplay(self):
        before = read_bytes(self.model)
        self.assertEqual(run("replay", "--manifest", self.model + ".manifest.json"), 0)
        self.assertEqual(read_bytes(self.model), before)

    def testEvaluate(self):
        output = self.path("report.json")
        self.assertEqual(run("evaluate", "--checkpoint", self.model, "--data", self.test, "--output", output), 0)
        with open(output) as f:
            report = json.load(f)
        self.assertEqual(sum(report["counts"].values()), 60)
        self.assertIn("f1", report["metrics"])

    def testExplainFlow(self):
        for method in ("exact", "kernel-shap", "gradient-shap"):
            output = self.path(f"{method}.json")
            code = run(
                "explain", method, "--checkpoint", self.model, "--data", self.test,
                "--instance-index", 3, "--background-size", 4, "--samples", 8, "--output", output,
            )
            self.assertEqual(code, 0)
            with open(output) as f:
                explanation = json.load(f)
            self.assertEqual(len(explanation["phi"]), 10)
        self.assertEqual(
            run("explain", "exact", "--checkpoint", self.model, "--data", self.test, "--output", self.path("x.json")),
            2,
        )

    def testExplainSummary(self):
        output = self.path("summary.csv")
        code = run(
            "explain", "summary", "--checkpoint", self.model, "--data", self.test,
            "--per-class", 2, "--budget", 32, "--background-size", 4, "--output", output,
        )
        self.assertEqual(code, 0)
        with open(output) as f:
            self.assertEqual(f.readline().strip(), "category,sample,feature,feature_value,shap_value")

    def testQuality(self):
        quality = self.path("quality.json")
        self.assertEqual(run("quality", "build", "--checkpoint", self.model, "--data", self.train, "--output", quality), 0)
        self.assertEqual(
            run("quality", "check", "--checkpoint", self.model, "--data", self.test, "--quality", quality, "--instance-index", 0),
            0,
        )
        output = self.path("checker.json")
        self.assertEqual(
            run("quality", "evaluate", "--checkpoint", self.model, "--data", self.test, "--quality", quality, "--output", output),
            0,
        )
        with open(output) as f:
            self.assertEqual(json.load(f)["total"], 60)
        embeddings = self.path("embeddings.csv")
        self.assertEqual(run("quality", "export", "--quality", quality, "--output", embeddings), 0)
        with open(embeddings) as f:
            self.assertTrue(f.readline().startswith("category,x0,x1"))
        # missing --quality
        self.assertEqual(run("quality", "check", "--checkpoint", self.model, "--data", self.test), 2)

    def testStaleQualityDataset(self):
        quality = self.path("stale_quality.json")
        self.assertEqual(run("quality", "build", "--checkpoint", self.model, "--data", self.train, "--output", quality), 0)
        other = self.path("other_model.json")
        argv = list(self.train_argv)
        argv[argv.index(self.model)] = other
        argv[-1] = 1
        self.assertEqual(run(*argv), 0)
        code = run(
            "quality", "check", "--checkpoint", other, "--data", self.test, "--quality", quality, "--instance-index", 0
        )
        self.assertEqual(code, 5)

    def testWrongDataKind(self):
        graph = self.path("simple_graph.json")
        provenance_graph.save_graph(graph, simple_graph.graph)
        self.assertEqual(run("evaluate", "--checkpoint", self.model, "--data", graph), 3)
        self.assertEqual(
            run("quality", "build", "--checkpoint", self.model, "--data", graph, "--output", self.path("q.json")), 3
        )
        self.assertEqual(
            run("explain", "exact", "--checkpoint", self.model, "--data", graph,
                "--instance-index", 0, "--output", self.path("x.json")),
            3,
        )
        with self.assertRaises(KindError) as raised:
            cli._load_data("cnn_gru", graph)
        self.assertIn("cnn_gru", str(raised.exception))
        self.assertIn(graph, str(raised.exception))

    def testQualityCheckBeforeBuild(self):
        code = run(
            "quality", "check", "--checkpoint", self.model, "--data", self.test,
            "--quality", self.path("never_built.json"), "--instance-index", 0,
        )
        self.assertEqual(code, 3)

    def testMalformedRowsAreSkipped(self):
        with open(self.csv) as f:
            lines = f.readlines()
        lines[2] = lines[2].rstrip("\n") + ",EXTRA\n"
        lines.insert(4, "\n")
        bad = self.path("extra_field.csv")
        with open(bad, "w") as f:
            f.writelines(lines)
        output = self.path("extra_field.json")
        self.assertEqual(run("preprocess", "netflow", "--input", bad, "--output", output), 0)
        with open(output) as f:
            self.assertEqual(len(json.load(f)), 199)
        self.assertEqual(run("preprocess", "netflow", "--input", bad, "--output", output, "--strict"), 3)
        self.assertEqual(
            run("preprocess", "netflow", "--input", self.csv, "--output", output, "--dot", self.path("flows.dot")), 2
        )

    def testExitCodes(self):
        self.assertEqual(run("frobnicate"), 2)
        self.assertEqual(run("train", "--train", self.train, "--output", self.path("m.json"), "--clients", 0), 2)
        self.assertEqual(run("preprocess", "netflow", "--input", self.path("missing.csv"), "--output", self.path("o.json")), 3)

        bad = self.path("bad.csv")
        with open(self.csv) as f:
            lines = f.readlines()
        fields = lines[3].rstrip("\n").split(",")
        fields[5] = "abc"
        lines[3] = ",".join(fields) + "\n"
        with open(bad, "w") as f:
            f.writelines(lines)
        self.assertEqual(
            run("preprocess", "netflow", "--input", bad, "--output", self.path("o.json"), "--strict"), 3
        )
        self.assertEqual(run("preprocess", "netflow", "--input", bad, "--output", self.path("o.json")), 0)

        with mock.patch.object(detectors, "train_local", side_effect=TrainingError("loss diverged at epoch 0", epoch=0)):
            self.assertEqual(
                run("train", "--train", self.train, "--output", self.path("m.json"), "--clients", 2, "--rounds", 1),
                4,
            )


class CliGraphTest(unittest.TestCase):
    def testGraphPipeline(self):
        with tempfile.TemporaryDirectory() as tmp:
            events = os.path.join(tmp, "events.jsonl")
            graph = os.path.join(tmp, "graph.json")
            test = os.path.join(tmp, "graph_test.json")
            model = os.path.join(tmp, "egs.json")
            self.assertEqual(run("synth", "provenance", "--nodes", 40, "--edges", 80, "--output", events), 0)
            dot = os.path.join(tmp, "graph.dot")
            self.assertEqual(
                run("preprocess", "provenance", "--input", events, "--output", graph,
                    "--test-output", test, "--dot", dot),
                0,
            )
            with open(dot) as f:
                self.assertIn("digraph", f.read())
            self.assertEqual(
                run("train", "--model", "e-graphsage", "--train", graph, "--test", test,
                    "--clients", 1, "--rounds", 1, "--epochs", 2, "--output", model),
                0,
            )
            edge_id = provenance_graph.load_graph(graph).edges[0].id
            output = os.path.join(tmp, "explanation.json")
            code = run(
                "explain", "gradient-shap", "--checkpoint", model, "--data", graph,
                "--edge-id", edge_id, "--samples", 4, "--output", output,
            )
            self.assertEqual(code, 0)
            with open(output) as f:
                self.assertEqual(json.load(f)["edge_id"], edge_id)
            with open(os.path.join(tmp, "explanation.dot")) as f:
                self.assertIn("digraph", f.read())
            self.assertEqual(
                run("explain", "kernel-shap", "--checkpoint", model, "--data", graph, "--output", output), 2
            )
            self.assertEqual(
                run("explain", "gradient-shap", "--checkpoint", model, "--data", graph,
                    "--edge-id", "no-such-edge", "--output", output),
                3,
            )

            features = os.path.join(tmp, "features.json")
            netflow_ingest.save_features(features, [FeatureVector((0.5,) * 10, 1)])
            self.assertEqual(run("evaluate", "--checkpoint", model, "--data", features), 3)
            with self.assertRaises(KindError) as raised:
                cli._load_data("e_graphsage", features)
            self.assertIn("e_graphsage", str(raised.exception))
