"""Quick end-to-end check of the coinfer extension module."""

import coinfer

config, lut = coinfer.fixture("adaptivity")
print("clients:", config.clients())

pp = coinfer.Scheme.uniform(config, "pp:1")
dp = coinfer.Scheme.uniform(config, "dp")
fast = coinfer.simulate(config, lut, pp, horizon_ms=5000.0, seed=1)
again = coinfer.simulate(config, lut, pp, horizon_ms=5000.0, seed=1)
assert fast.throughput == again.throughput, "simulation is not deterministic"
slow = coinfer.simulate(config.with_bandwidth(1.0), lut, pp, horizon_ms=5000.0, seed=1)
assert slow.throughput < fast.throughput
print(f"pp:1 at 100 Mbps {fast.throughput:.2f}/s, at 1 Mbps {slow.throughput:.2f}/s")

best = coinfer.optimize(config, lut)
print("optimizer picked", best)
low = coinfer.optimize(config.with_bandwidth(1.0), lut)
print("optimizer at 1 Mbps picked", low)
assert all(s == "dp" for s in low.assignment().values())

frame = coinfer.encode_message(2, 42, b"x" * 1000)
assert coinfer.decode_message(frame) == (2, 42, b"x" * 1000)

data = coinfer.generate_training_set(40, 3)
model, report = coinfer.train(data, "throughput", epochs=3, hidden=16, seed=1)
est = model.predict_throughput(config, lut, best)
assert est > 0
print(f"trained on {len(data)} samples, val MAPE {report['val_mape']:.3f}, estimate {est:.2f}/s")
print("ok")
