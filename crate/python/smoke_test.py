"""Smoke test for the wgexciton Python extension.

Build and install first:  pip install --no-build-isolation crates/py
"""

import math
from pathlib import Path

import wgexciton as wg

FIXTURES = Path(__file__).resolve().parents[1] / "crates" / "core" / "fixtures"


def grid(step, t_max):
    return [i * step for i in range(int(t_max / step) + 1)]


def main():
    fc = wg.LayerStack.load(str(FIXTURES / "fc.toml"))
    gi = wg.LayerStack.load(str(FIXTURES / "gi.toml"))
    print(fc, gi)

    modes = fc.modes(2)
    m1 = modes[0]
    print(m1)
    assert m1.index == 1
    assert 0.03 < m1.zeta.real < 0.05
    assert len(gi.modes(4)) == 4

    g = wg.gamma()
    assert abs(g * 140.045 - 1.0) < 1e-4

    # A weakly coupled guide without hyperfine structure decays at gamma.
    t = grid(0.5, 192.0)
    weak = wg.fc_trace(fc, t, length_mm=1.0, zeta=1e-9, hyperfine=wg.Hyperfine.none())
    rate = wg.extract_speedup(t, weak)
    assert abs(rate - 1.0) < 1e-4, rate

    exact = [math.exp(-4.0 * g * x) for x in t]
    assert abs(wg.extract_speedup(t, exact) - 4.0) < 1e-8

    trace = wg.fc_trace(fc, t, length_mm=1.0)
    counts = wg.poissonize(t, trace, 1e5, seed=3)
    assert counts == wg.poissonize(t, trace, 1e5, seed=3)
    assert abs(sum(counts) - 1e5) < 5 * math.sqrt(1e5)

    gi_t = grid(0.25, 60.0)
    on = wg.gi_trace(gi, gi_t, hyperfine=wg.Hyperfine.none())
    gi_rate = wg.extract_speedup(gi_t, on)
    print(f"grazing incidence rate at the mode angle: {gi_rate:.1f} gamma")
    assert gi_rate > 10.0

    decay = [round(1e4 * math.exp(-2.0 * g * x)) for x in t]
    res = wg.fit("exp_decay", t, decay)
    print(res)
    assert res.converged
    assert abs(res.params[1] - 2.0) < 3 * res.std_errors[1]

    try:
        wg.fit("exp_decay", t, decay, init=[1.0, -1.0])
    except ValueError as e:
        assert "init" in str(e)
    else:
        raise AssertionError("init outside bounds accepted")

    hf = wg.Hyperfine(6.0, 6.0)
    foil = wg.foil_intensity(20.0, t, hf)
    assert len(foil) == len(t) and all(v >= 0 for v in foil)

    print("smoke test passed")


if __name__ == "__main__":
    main()
