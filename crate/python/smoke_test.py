"""Smoke test for the pygaformer extension.

Build and install it first:

    pip install --no-build-isolation ./crates/python

then run `python3 python/smoke_test.py` from anywhere.
"""

import json
import math
import os
import tempfile

import pygaformer as g

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def check_masks():
    c, s, m = g.attention_masks([0.0, 1.0, 0.0, 1.0], epsilon=1, mode="r_mul_s")
    assert c == [[1.0 if a == b else 0.0 for b in (0, 1, 0, 1)] for a in (0, 1, 0, 1)], c
    assert all(0.0 <= x <= 1.0 for row in s + m for x in row)
    assert all(s[i][i] == 1.0 for i in range(4))


def check_metrics():
    cand, ref = g.tokenize("The the the cat"), g.tokenize("the cat sat")
    assert cand == ["the", "the", "the", "cat"]
    assert math.isclose(g.sentence_bleu(cand, [ref], max_n=2), math.sqrt(1 / 6), abs_tol=1e-12)
    assert g.corpus_bleu([ref], [[ref]]) == 1.0
    assert math.isclose(g.ibleu(ref, ref, ["a", "b"]), 0.9, abs_tol=1e-12)
    assert g.rouge_l(ref, ref) == 1.0


def check_model():
    with tempfile.TemporaryDirectory() as out:
        os.chdir(ROOT)
        status = g.run_cli(["train", "--config", "configs/toy.cfg", "--output-dir", out, "--set", "max_steps=300"])
        assert status == 0, status
        model = g.Model.load(os.path.join(out, "best.ckpt"))
        cfg = json.loads(model.config)
        assert cfg["layers"] == 2 and cfg["hidden"] == 64

        best = model.generate("how learn quick buy city", beam=4, top=2)
        assert len(best) == 2 and best[0][1] >= best[1][1], best
        print("generate:", best)

        tokens, z = model.inspect("how can i learn fast")
        assert tokens == ["how", "can", "i", "learn", "fast"]
        assert len(z) == 2 and all(len(row) == 5 and all(0 < v < 1 for v in row) for row in z)
        assert (tokens, z) == model.inspect("how can i learn fast")

        try:
            g.Model.load(os.path.join(out, "missing.ckpt"))
        except OSError as e:
            assert "missing.ckpt" in str(e)
        else:
            raise AssertionError("loading a missing checkpoint should fail")


if __name__ == "__main__":
    check_masks()
    check_metrics()
    check_model()
    print("python smoke test passed")
