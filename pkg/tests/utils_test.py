# This source code is licensed under the MIT license found in the
# LICENSE file in the root directory of this source tree.

import os
import tempfile
import unittest
from unittest import mock

from fedhunter import utils


class UtilsTest(unittest.TestCase):
    def testDeriveSeed(self):
        self.assertEqual(utils.derive_seed(5, 3, 1), 7)
        self.assertEqual(utils.derive_seed(42, 0, 0), 42)

    def testWorkerCount(self):
        available = os.cpu_count() or 1
        with mock.patch.dict(os.environ, {"FEDHUNTER_THREADS": "1"}):
            self.assertEqual(utils.worker_count(), 1)
        with mock.patch.dict(os.environ, {"FEDHUNTER_THREADS": "0"}):
            self.assertEqual(utils.worker_count(), available)
        with mock.patch.dict(os.environ, {"FEDHUNTER_THREADS": "100000"}):
            self.assertEqual(utils.worker_count(), available)
        with mock.patch.dict(os.environ, {"FEDHUNTER_THREADS": "many"}):
            self.assertEqual(utils.worker_count(), available)

    def testJsonRoundTrip(self):
        payload = {"a": [0.1, 1e-300, -0.0], "b": "text"}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sub", "payload.json")
            utils.write_json(path, payload)
            self.assertEqual(utils.read_json(path), payload)
            self.assertEqual(os.listdir(os.path.dirname(path)), ["payload.json"])

    def testDumpsRejectsNan(self):
        with self.assertRaises(ValueError):
            utils.dumps({"x": float("nan")})

    def testFingerprint(self):
        self.assertEqual(utils.fingerprint("abc"), utils.fingerprint("abc"))
        self.assertNotEqual(utils.fingerprint("abc"), utils.fingerprint("abd"))
        self.assertEqual(len(utils.fingerprint("")), 64)
