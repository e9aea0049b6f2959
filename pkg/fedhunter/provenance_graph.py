# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import enum
import json
import logging
import re
from collections import OrderedDict
from typing import Dict, List

import networkx as nx
import numpy as np

from fedhunter import utils
from fedhunter.errors import DataError, GraphError, KindError, TemplateError
from fedhunter.netflow_ingest import stratified_indices

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 384
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_SPLIT = re.compile(r"[\W_]+")
_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class NodeType(enum.Enum):
    NET_FLOW = "NET_FLOW"
    FILE = "FILE"
    SUBJECT = "SUBJECT"
    UNNAMED_PIPE = "UNNAMED_PIPE"


class EdgeType(enum.Enum):
    EXECUTE = "EXECUTE"
    ACCEPT = "ACCEPT"
    MODIFY_PROCESS = "MODIFY_PROCESS"
    CREATE_OBJECT = "CREATE_OBJECT"
    RENAME = "RENAME"


# Sentence rendered for each object/event type before embedding
SENTENCE_PATTERNS = {
    NodeType.NET_FLOW: 'A "net_flow" node has a local address of {{local_address}}, '
    "a local port of {{local_port}}, a remote address of {{remote_address}}, "
    "and a remote port of {{remote_port}}.",
    NodeType.FILE: 'A "file" node has the subtype of "{{sub_type}}".',
    NodeType.SUBJECT: 'A "subject" node has the subtype of "{{sub_type}}".',
    NodeType.UNNAMED_PIPE: "",
    EdgeType.EXECUTE: 'A "execute" edge executed the "{{exec}}" program, '
    'and its command line is "{{cmd_line}}".',
    EdgeType.ACCEPT: 'An "accept" edge accepted the connection from {{address}} '
    'with the port of {{port}}, and it executed the "{{exec}}" program.',
    EdgeType.MODIFY_PROCESS: 'An "modify_process" edge executed the "{{exec}}" program.',
    EdgeType.CREATE_OBJECT: 'An "create_object" edge executed the "{{exec}}" program.',
    EdgeType.RENAME: 'An "rename" edge executed the "{{exec}}" program.',
}


def required_attrs(entity_type):
    return tuple(_PLACEHOLDER.findall(SENTENCE_PATTERNS[entity_type]))


class ProvNode:
    def __init__(self, id, node_type, attrs=None):
        self.id = id
        self.node_type = node_type
        self.attrs = dict(attrs or {})
        self.embedding = embed_sentence(render_sentence(self))

    @property
    def type(self):
        return self.node_type

    def __repr__(self):
        return f"{self.id} ({self.node_type.value})"

    def to_dict(self):
        return {"id": self.id, "type": self.node_type.value, "attrs": self.attrs}


class ProvEdge:
    def __init__(self, id, edge_type, src, dst, attrs=None, label=0):
        self.id = id
        self.edge_type = edge_type
        self.src = src
        self.dst = dst
        self.attrs = dict(attrs or {})
        self.label = int(label)
        self.embedding = embed_sentence(render_sentence(self))

    @property
    def type(self):
        return self.edge_type

    def __repr__(self):
        return f"{self.id}: {self.src} -> {self.dst} ({self.edge_type.value}, label={self.label})"

    def to_dict(self):
        return {
            "id": self.id,
            "type": self.edge_type.value,
            "src": self.src,
            "dst": self.dst,
            "attrs": self.attrs,
            "label": self.label,
        }


def render_sentence(entity):
    pattern = SENTENCE_PATTERNS[entity.type]
    needed = required_attrs(entity.type)
    for key in needed:
        if key not in entity.attrs:
            raise TemplateError(entity.type.value, key)
    extra = sorted(set(entity.attrs) - set(needed))
    if extra:
        raise DataError(
            f"{entity.type.value} {entity.id} has attributes {extra} outside its sentence pattern"
        )
    return _PLACEHOLDER.sub(lambda m: str(entity.attrs[m.group(1)]), pattern)


def fnv1a_64(token):
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


# Signed feature hashing of the sentence tokens into EMBEDDING_DIM buckets.
def embed_sentence(sentence):
    vector = np.zeros(EMBEDDING_DIM, dtype=np.float64)
    for token in _TOKEN_SPLIT.split(sentence.lower()):
        if not token:
            continue
        h = fnv1a_64(token)
        vector[h % EMBEDDING_DIM] += -1.0 if h >> 63 else 1.0
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        return vector
    return vector / norm


# A provenance graph uses audited events as edges and system objects as nodes.
# The graph is immutable once built: adjacency is derived from the edge list.
class ProvenanceGraph:
    def __init__(self, name=""):
        self.name = name
        self.nodes: Dict[str, ProvNode] = OrderedDict()
        self.edges: List[ProvEdge] = []
        self.edge_index: Dict[str, int] = {}
        self.adjacency: Dict[str, List] = OrderedDict()

    def add_node(self, id, node_type, attrs=None):
        if id in self.nodes:
            raise GraphError(f"duplicate node id {id}")
        if not isinstance(node_type, NodeType):
            node_type = NodeType(node_type)
        node = ProvNode(id, node_type, attrs)
        self.nodes[id] = node
        self.adjacency[id] = []
        return node

    def add_edge(self, id, edge_type, src, dst, attrs=None, label=0):
        if id in self.edge_index:
            raise GraphError(f"duplicate edge id {id}")
        dangling = [n for n in (src, dst) if n not in self.nodes]
        if dangling:
            raise GraphError(f"edge {id} references unknown nodes {dangling}")
        if label not in (0, 1):
            raise DataError(f"edge {id} has label {label}, expected 0 or 1")
        if not isinstance(edge_type, EdgeType):
            edge_type = EdgeType(edge_type)
        edge = ProvEdge(id, edge_type, src, dst, attrs, label)
        self.edge_index[id] = len(self.edges)
        self.edges.append(edge)
        self._link(self.edge_index[id], edge)
        return edge

    def _link(self, index, edge):
        self.adjacency[edge.src].append((index, edge.dst))
        if edge.dst != edge.src:
            self.adjacency[edge.dst].append((index, edge.src))

    def find_edge(self, edge_id):
        if edge_id not in self.edge_index:
            raise GraphError(f"unknown edge id {edge_id}")
        return self.edges[self.edge_index[edge_id]]

    def rebuild_adjacency(self):
        self.adjacency = OrderedDict((n, []) for n in self.nodes)
        for index, edge in enumerate(self.edges):
            self._link(index, edge)
        return self.adjacency

    def check_consistency(self, verbose=False):
        for index, edge in enumerate(self.edges):
            if edge.src not in self.nodes or edge.dst not in self.nodes:
                if verbose:
                    print(f"Edge {edge.id} has a dangling endpoint", flush=True)
                return False
            if self.edge_index.get(edge.id) != index:
                if verbose:
                    print(f"Edge {edge.id} is not indexed", flush=True)
                return False
        expected = OrderedDict((n, []) for n in self.nodes)
        for index, edge in enumerate(self.edges):
            expected[edge.src].append((index, edge.dst))
            if edge.dst != edge.src:
                expected[edge.dst].append((index, edge.src))
        for n, incident in expected.items():
            if sorted(self.adjacency.get(n, [])) != sorted(incident):
                if verbose:
                    print(f"Adjacency of {n} is stale", flush=True)
                return False
        return True

    def node_features(self):
        if not self.nodes:
            return np.zeros((0, EMBEDDING_DIM))
        return np.stack([n.embedding for n in self.nodes.values()])

    def edge_features(self):
        if not self.edges:
            return np.zeros((0, EMBEDDING_DIM))
        return np.stack([e.embedding for e in self.edges])

    def edge_labels(self):
        return np.array([e.label for e in self.edges], dtype=np.int64)

    def to_networkx(self):
        g = nx.MultiGraph()
        g.add_nodes_from(self.nodes)
        for edge in self.edges:
            g.add_edge(edge.src, edge.dst, key=edge.id)
        return g

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "nodes": [n.to_dict() for n in self.nodes.values()],
            "edges": [e.to_dict() for e in self.edges],
        }

    def __repr__(self):
        return f"ProvenanceGraph {self.name} |V|={len(self.nodes)} |E|={len(self.edges)}"


def _parse_line(line, lineno):
    try:
        record = json.loads(line)
    except ValueError as e:
        raise DataError(f"line {lineno}: invalid JSON ({e})") from e
    if record.get("kind") not in ("node", "edge"):
        raise DataError(f"line {lineno}: kind must be 'node' or 'edge'")
    return record


def build_graph(lines, two_pass=True, name=""):
    records = []
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            records.append((lineno, _parse_line(line, lineno)))

    graph = ProvenanceGraph(name)
    if two_pass:
        ordered = [r for r in records if r[1]["kind"] == "node"] + [
            r for r in records if r[1]["kind"] == "edge"
        ]
    else:
        ordered = records

    dangling = []
    for lineno, record in ordered:
        try:
            if record["kind"] == "node":
                graph.add_node(record["id"], record["type"], record.get("attrs"))
                continue
            missing = [n for n in (record["src"], record["dst"]) if n not in graph.nodes]
            if missing:
                dangling.append((record["id"], missing))
                continue
            graph.add_edge(
                record["id"],
                record["type"],
                record["src"],
                record["dst"],
                record.get("attrs"),
                record.get("label", 0),
            )
        except KeyError as e:
            raise DataError(f"line {lineno}: missing field {e}") from e
        except ValueError as e:
            raise DataError(f"line {lineno}: {e}") from e

    if dangling:
        details = ", ".join(f"{edge} -> {missing}" for edge, missing in dangling)
        raise GraphError(f"edges reference unknown nodes: {details}")
    assert graph.check_consistency()
    logger.info(f"Built {graph}")
    return graph


def load_events(path, two_pass=True):
    with open(path, "r", encoding="utf-8") as f:
        return build_graph(f, two_pass=two_pass, name=str(path))


def graph_from_dict(archive, name=""):
    if not isinstance(archive, dict) or not {"nodes", "edges"} <= set(archive):
        raise KindError(f"{name or 'archive'} does not hold a provenance graph")
    if archive.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported graph archive version {archive.get('format_version')}"
        )
    graph = ProvenanceGraph(name)
    try:
        for n in archive["nodes"]:
            graph.add_node(n["id"], n["type"], n.get("attrs"))
        for e in archive["edges"]:
            graph.add_edge(e["id"], e["type"], e["src"], e["dst"], e.get("attrs"), e["label"])
    except (KeyError, TypeError, AttributeError, ValueError) as e:
        raise DataError(f"{name or 'archive'}: malformed graph entry: {e}") from e
    return graph


# Embeddings are not archived, they are recomputed from the sentences on load.
def save_graph(path, graph):
    return utils.write_json(path, graph.to_dict())


def load_graph(path):
    try:
        archive = utils.read_json(path)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    return graph_from_dict(archive, name=str(path))


def edge_subgraph(graph, edge_ids, name=""):
    keep = set(edge_ids)
    unknown = [e for e in keep if e not in graph.edge_index]
    if unknown:
        raise GraphError(f"unknown edge ids {sorted(unknown)}")
    edges = [e for e in graph.edges if e.id in keep]
    endpoints = set()
    for e in edges:
        endpoints.update((e.src, e.dst))
    return _induced(graph, [n for n in graph.nodes if n in endpoints], edges, name)


def _induced(graph, node_ids, edges, name):
    sub = ProvenanceGraph(name or graph.name)
    for n in node_ids:
        node = graph.nodes[n]
        sub.add_node(node.id, node.node_type, node.attrs)
    for e in edges:
        sub.add_edge(e.id, e.edge_type, e.src, e.dst, e.attrs, e.label)
    return sub


# Returns the sub-graph induced by every node within k undirected hops of either
# endpoint of the given edge.
def khop_subgraph(graph, edge_id, k):
    if k < 1:
        raise ValueError(f"hop count must be at least 1, got {k}")
    edge = graph.find_edge(edge_id)
    g = graph.to_networkx()
    reached = set()
    for endpoint in (edge.src, edge.dst):
        reached.update(nx.single_source_shortest_path_length(g, endpoint, cutoff=k))
    node_ids = [n for n in graph.nodes if n in reached]
    edges = [e for e in graph.edges if e.src in reached and e.dst in reached]
    return _induced(graph, node_ids, edges, f"{graph.name}:{edge_id}@{k}")


# Stratified train/test split of the labeled edges, each side as its own graph.
def split_edges(graph, train_fraction=0.7, seed=0):
    train, test = stratified_indices(graph.edge_labels(), train_fraction, seed)
    return (
        edge_subgraph(graph, [graph.edges[i].id for i in train], name=f"{graph.name}:train"),
        edge_subgraph(graph, [graph.edges[i].id for i in test], name=f"{graph.name}:test"),
    )
