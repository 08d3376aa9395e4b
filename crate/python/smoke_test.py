"""Smoke test for the specprune extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import math
import os
import tempfile

import specprune as sp


def main():
    assert sp.frame_offset(0.0, 12) == 11
    assert sp.frame_offset(6.0, 12) == 6
    assert sp.frame_offset(30.0, 12) == 1
    assert sp.k_base(True, 0.8) == 32
    assert sp.k_base(False, 1.0) == 24
    assert sp.layer_flops(600, 4096, 11008) == 97_320_960_000
    assert abs(sp.reduction_estimate(32, 0.48, 0.81) - 0.6355) < 1e-4

    b = sp.exact_reduction([10, 10, 5, 5], 10, 8, 16)
    assert b["full_flops"] > b["pruned_flops"] > 0
    assert 0.0 < b["reduction_fraction"] < 1.0

    model = sp.Model()
    ep = sp.Episode.generate("small", seed=3, steps=10)
    assert len(ep) == 10 and ep.visual_tokens == 128

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ep.json")
        ep.save(path)
        again = sp.Episode.load(path)
        assert len(again) == len(ep) and again.important(4) == ep.important(4)

    everything = list(range(ep.seq_len))
    assert ep.oracle_error(5, everything) == 0.0

    steps = sp.run_episode(model, ep, "specprune")
    assert len(steps) == 10
    assert steps[0]["pruned_visual"] == 0
    for s in steps:
        assert s["retained_visual"] + s["pruned_visual"] == s["visual_tokens"]
        assert s["retained_global"] + s["retained_dynamic"] + s["retained_local"] == s["retained_visual"]
        assert s["hit_rate"] >= s["hit_rate_first"]
        assert math.isfinite(s["action_error"])
    assert any(s["pruned_visual"] > 0 for s in steps[1:])

    none = sp.run_episode(model, ep, "none")
    assert all(s["pruned_visual"] == 0 and s["flops_reduction"] == 0.0 for s in none)

    report = sp.run_suite('episodes = 2\nsteps = 6\nstrategies = ["none", "specprune"]\n')
    assert [s["strategy"] for s in report["summaries"]] == ["none", "specprune"]
    assert report["violations"] == []

    try:
        sp.run_episode(model, ep, "bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown strategy accepted")

    print("smoke test passed:", sp.STRATEGIES)


if __name__ == "__main__":
    main()
