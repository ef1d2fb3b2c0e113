"""Smoke test for the pymcusplit extension.

Build it first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import pymcusplit as ms


def main():
    model = ms.Model.tiny_cnn(seed=1)
    assert model.precision == "float32"
    assert ms.Model.from_json(model.to_json()).weight_bytes == model.weight_bytes

    fleet = ms.Fleet.emulated(5)
    assert len(fleet) == 3
    plan = ms.plan(model, fleet, strategy="optimized")
    assert len(plan.ratings) == 3
    assert sum(plan.fragment_bytes) >= model.weight_bytes

    result = ms.run(model, plan, fleet, seed=3)
    assert result["verdict"]["pass"], result["verdict"]["message"]
    assert result["trace_csv"].startswith("layer,worker,")

    local = ms.run(model, ms.plan(model, ms.Fleet.homogeneous(1)), ms.Fleet.homogeneous(1))
    assert local["summary"]["network_bytes"] == 0 and local["summary"]["comm_s"] == 0.0

    int8 = model.quantize()
    out = ms.run(int8, ms.plan(int8, fleet), fleet)
    assert out["verdict"]["pass"]
    assert len(int8.forward()) == 10

    times = dict(ms.compare_strategies(model, ms.Fleet.emulated(1)))
    assert len(set(times.values())) == 1, times

    rows = ms.sweep_memory(model, [1, 2, 4])
    assert [r["workers"] for r in rows] == [1, 2, 4]
    assert rows[0]["max_peak_kb"] >= rows[-1]["max_peak_kb"]

    table = ms.calibrate("frequency_mhz,workload_kb,time_s\n600,79.8,1\n")
    assert abs(table["entries"][0]["k1"] - 0.133) < 1e-9

    try:
        ms.calibrate("frequency_mhz,workload_kb,time_s\n600,x,1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("bad calibration line accepted")

    tiny_ram = ms.Fleet.from_json('[{"id":0,"frequency_mhz":600,"bandwidth_kb_s":12500,"flash_limit_kb":8192,"ram_limit_kb":0.5}]')
    try:
        ms.run(model, ms.plan(model, tiny_ram), tiny_ram)
    except ms.OutOfMemoryError:
        pass
    else:
        raise AssertionError("expected an out-of-memory fault")

    print("pymcusplit smoke test passed")


if __name__ == "__main__":
    main()
