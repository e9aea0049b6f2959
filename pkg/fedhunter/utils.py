# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import hashlib
import json
import logging
import os
import tempfile

logger = logging.getLogger(__name__)


def worker_count():
    # FEDHUNTER_THREADS caps the number of concurrent workers, 0 means auto
    value = os.getenv("FEDHUNTER_THREADS", "0")
    try:
        requested = int(value)
    except ValueError:
        logger.warning(f"Ignoring invalid FEDHUNTER_THREADS value {value!r}")
        requested = 0
    available = os.cpu_count() or 1
    if requested <= 0:
        return available
    return min(requested, available)


def derive_seed(seed, client_id, round_index):
    return int(seed) ^ int(client_id) ^ int(round_index)


# Floats go through repr(), which round-trips float64 exactly.
def dumps(obj, indent=None):
    return json.dumps(obj, indent=indent, allow_nan=False)


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def atomic_write_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def write_json(path, obj, indent=None):
    return atomic_write_text(path, dumps(obj, indent=indent) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def fingerprint(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
