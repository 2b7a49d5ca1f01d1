import csv
import io
import json
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stdout

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tools"))
import import_annotations  # noqa: E402


def run(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = import_annotations.main(list(argv))
    return code, list(csv.reader(io.StringIO(buf.getvalue())))


class ImportAnnotations(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.dir.cleanup()

    def write(self, name, text):
        path = os.path.join(self.dir.name, name)
        with open(path, "w") as f:
            f.write(text)
        return path

    def test_majority_vote_ties_are_spurious(self):
        votes = self.write("v.csv", "class_index,feature_index,answer\n"
                                    "3,7,main_object\n3,7,main_object\n3,7,background\n"
                                    "3,9,main_object\n3,9,separate_object\n1,2,Main_Object\n")
        names = self.write("n.txt", "a\nb\nc\nd, with comma\n")
        animate = self.write("a.txt", "3\n")
        code, rows = run(votes, "--class-names", names, "--animate", animate)
        self.assertEqual(code, 0)
        self.assertEqual(rows, [["class_id", "class_name", "feature_index", "label", "animacy"],
                                ["1", "b", "2", "core", "unknown"],
                                ["3", "d, with comma", "7", "core", "animate"],
                                ["3", "d, with comma", "9", "spurious", "animate"]])

    def test_json_map(self):
        m = self.write("m.json", json.dumps({"0": {"core": [4], "spurious": [1, 2]}}))
        code, rows = run(m)
        self.assertEqual(code, 0)
        self.assertEqual([r[2:4] for r in rows[1:]], [["1", "spurious"], ["2", "spurious"], ["4", "core"]])

    def test_errors(self):
        bad = self.write("b.csv", "class,feature\n1,2\n")
        self.assertEqual(run(bad)[0], 1)
        clash = self.write("c.json", json.dumps({"0": {"core": [1], "spurious": [1]}}))
        self.assertEqual(run(clash)[0], 1)
        ids = self.write("i.txt", "0\n")
        ok = self.write("ok.json", "{}")
        self.assertEqual(run(ok, "--animate", ids, "--inanimate", ids)[0], 1)


if __name__ == "__main__":
    unittest.main()
