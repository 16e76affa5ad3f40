"""Smoke test for the Python bindings.

Build the extension first:

    cargo build -p maskfocus-py --features extension-module --release

then run `python3 python/smoke_test.py` from the repository root.
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    for profile in ("release", "debug"):
        for name in ("libmaskfocus_py.so", "libmaskfocus_py.dylib", "maskfocus_py.dll"):
            built = os.path.join(target, profile, name)
            if os.path.exists(built):
                tmp = tempfile.mkdtemp()
                dest = os.path.join(tmp, "maskfocus_py.pyd" if name.endswith(".dll") else "maskfocus_py.so")
                shutil.copy(built, dest)
                spec = importlib.util.spec_from_file_location("maskfocus_py", dest)
                module = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(module)
                return module
    sys.exit("extension not built; see the module docstring")


def main():
    mf = load_module()

    assert mf.bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d"]]) == 1.0
    assert mf.bleu([["x", "y"]], [["a", "b"]]) == 0.0
    golden = mf.bleu([["a", "b", "x", "y"]], [["a", "b", "c", "d"]])
    assert abs(golden - (1.0 / 36.0) ** 0.25) < 1e-12, golden

    assert mf.lexicon_prf([["a", "b"]], [["b", "c"]], ["a", "b", "c"]) == (0.5, 0.5, 0.5)

    lines, truth = mf.synth_corpus(concepts=4, noise=32, dialogues=20, seed=1)
    assert len(lines) == 20
    assert dict(truth) == {"c1": "r1", "c2": "r2", "c3": "r3", "c4": "r4"}
    first = json.loads(lines[0])
    assert first["turns"][-1]["speaker"] == "agent"

    try:
        mf.bleu([["a"]], [])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch should raise")

    out = tempfile.mkdtemp()
    settings = [
        ("out", out),
        ("seed", "2"),
        ("synth_dialogues", "80"),
        ("valid_size", "10"),
        ("test_size", "10"),
        ("embed_dim", "4"),
        ("utt_hidden", "4"),
        ("ctx_hidden", "4"),
        ("dec_hidden", "4"),
        ("max_epochs", "1"),
    ]
    report = json.loads(mf.run("experiment", settings))
    for key in ("hred.bleu", "focus.bleu", "probe_recall"):
        assert math.isfinite(report[key]["aggregate"]), key
    bank = mf.load_concept_bank(os.path.join(out, "bank_full.tsv"))
    means = [m for _, m, _ in bank]
    assert means == sorted(means, reverse=True)

    print("python smoke test passed")


if __name__ == "__main__":
    main()
