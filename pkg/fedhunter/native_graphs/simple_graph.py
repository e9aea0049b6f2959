# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from fedhunter import provenance_graph

graph = provenance_graph.ProvenanceGraph("simple")

graph.add_node("P", "SUBJECT", {"sub_type": "process"})
graph.add_node("F", "FILE", {"sub_type": "regular"})
graph.add_node("S", "NET_FLOW", {
    "local_address": "10.0.0.5",
    "local_port": 51234,
    "remote_address": "172.16.3.4",
    "remote_port": 443,
})

graph.add_edge("e0", "EXECUTE", "P", "F", {"exec": "/usr/bin/vim", "cmd_line": "vim notes.txt"})
graph.add_edge("e1", "ACCEPT", "P", "S", {"address": "172.16.3.4", "port": 443, "exec": "/usr/sbin/sshd"})
