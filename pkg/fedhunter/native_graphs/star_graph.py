# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from fedhunter import provenance_graph

# A process touching three identical files. L1 and L2 sit in symmetric
# positions with respect to the edge e0 -> L0.
graph = provenance_graph.ProvenanceGraph("star")

graph.add_node("C", "SUBJECT", {"sub_type": "process"})
for i in range(3):
    graph.add_node(f"L{i}", "FILE", {"sub_type": "regular"})
    graph.add_edge(f"e{i}", "CREATE_OBJECT", "C", f"L{i}", {"exec": "/usr/bin/bash"})
