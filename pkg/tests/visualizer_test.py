# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import os
import tempfile
import unittest

from fedhunter import detectors, explainer, visualizer
from fedhunter.native_graphs import attack_chain_graph, simple_graph


class VisualizerTest(unittest.TestCase):
    def testGraph(self):
        dot = visualizer.to_dot(simple_graph.graph)
        self.assertIn('P -> F [label="e0/EXECUTE/label=0"]', dot)
        self.assertIn('"P (SUBJECT)"', dot)

    def testAttackEdgesHighlighted(self):
        dot = visualizer.to_dot(attack_chain_graph.graph)
        self.assertEqual(dot.count("color=red"), 2)

    def testCanonFile(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "graph.dot")
            self.assertEqual(visualizer.to_dot(simple_graph.graph, path), path)
            with open(path) as f:
                text = f.read()
        self.assertEqual(text, visualizer.to_dot(simple_graph.graph))

    def testExplanation(self):
        model = detectors.create_model("e-graphsage", seed=0)
        explanation = explainer.explain_edge(
            model, attack_chain_graph.graph, "e3", config=explainer.GradientShapConfig(samples=4)
        )
        dot = visualizer.explanation_to_dot(explanation)
        self.assertIn(f"class={explanation.predicted_class}, score=", dot)
        self.assertEqual(dot.count("color=red"), 1)
        self.assertEqual(dot.count("penwidth=2"), 1)
        self.assertIn("implant|score=", dot)
