# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import logging

from graphviz import Digraph

from fedhunter import utils

logger = logging.getLogger(__name__)

HIGHLIGHT = "red"


def _digraph(graph, format):
    large_graph = len(graph.nodes) > 100 or len(graph.edges) > 100
    very_large_graph = len(graph.nodes) > 250 or len(graph.edges) > 250
    if very_large_graph:
        dot = Digraph(format=format, engine="neato")
    else:
        dot = Digraph(format=format)
    if graph.name:
        dot.attr("graph", label=graph.name)
    dot.attr("node", shape="record")
    # Speedup the layout of large graphs
    if large_graph:
        dot.attr("graph", overlap="scale")
        dot.attr("graph", spline="line")
    return dot, large_graph


def _write(dot, filename, format):
    if filename and format == "canon":
        lines = []
        for line in dot:
            lines.append(line if line.endswith("\n") else line + "\n")
        utils.atomic_write_text(filename, "".join(lines))
        return filename
    elif filename:
        return dot.render(filename=filename, format=format)
    return dot.source


def to_dot(graph, filename=None, format="canon"):
    dot, large_graph = _digraph(graph, format)
    for node in graph.nodes.values():
        label = node.id if large_graph else f"{node.id} ({node.node_type.value})"
        dot.node(node.id, label=label)
    for edge in graph.edges:
        label = edge.id if large_graph else f"{edge.id}/{edge.edge_type.value}/label={edge.label}"
        attrs = {"color": HIGHLIGHT} if edge.label == 1 else {}
        dot.edge(edge.src, edge.dst, label=label, **attrs)
    return _write(dot, filename, format)


# Node labels carry the normalized importance and edge labels the class and score,
# the explained edge is drawn in red.
def explanation_to_dot(explanation, filename=None, format="canon"):
    graph = explanation.subgraph
    assert graph is not None, "explanation carries no sub-graph"
    dot, _ = _digraph(graph, format)
    for node in graph.nodes.values():
        score = explanation.node_scores[node.id]
        attrs = {"penwidth": "2"} if node.id == explanation.center else {}
        dot.node(node.id, label=f"{node.id}|score={score:.4f}", **attrs)
    for edge in graph.edges:
        score = explanation.edge_scores[edge.id]
        attrs = {}
        if edge.id == explanation.edge_id:
            attrs["color"] = HIGHLIGHT
            label = f"class={explanation.predicted_class}, score={score:.4f}"
        else:
            label = f"class={edge.label}, score={score:.4f}"
        dot.edge(edge.src, edge.dst, label=label, **attrs)
    logger.debug(f"Rendered explanation of {explanation.edge_id} with {len(graph.edges)} edges")
    return _write(dot, filename, format)
