"""
Learning the feedback operator
==============================

Generate closed-loop training data, fit a DeepONet to the map
``(tau, x, u) -> U``, then put the network in the loop in place of the
kernel-based controller.

Run with ``python3 demos/03_neural_operator.py [outdir] [epochs]``.  The
default of 250 epochs takes several minutes on one core; 40 epochs is
enough to see the pipeline work.
"""

# %%
import sys
import time
from pathlib import Path

import numpy as np

from delaybs import io
from delaybs.analysis import bench_controllers, constants_for, state_error, verify_envelope
from delaybs.coefficients import ScenarioSampler, chebyshev_profile, make_delay, standard_coefficients
from delaybs.controller import AnalyticController
from delaybs.operator_learning import ModelConfig, NeuralController, evaluate, generate_dataset, save_model, train
from delaybs.simulator import SimConfig, simulate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 250

coeffs = standard_coefficients()
dt = {"D1": 0.02, "D2": 0.005}

# %%
# Each record pairs a state of an analytic closed-loop run with the control
# it produced. Extra runs with the gain scaled in [0.5, 1.5] cover states
# the exact controller never visits.
t0 = time.perf_counter()
data = generate_dataset(
    ScenarioSampler(seed=0), {"D1": 20, "D2": 40}, {r: SimConfig(dt=v, T=10.0) for r, v in dt.items()},
    coeffs, strides={"D1": 10, "D2": 20}, gain_range=(0.5, 1.5), gain_runs=1,
)
print(f"{len(data)} records in {time.perf_counter() - t0:.1f} s")
train_set, test_set = data.split(0.1, seed=0)

# %%
t0 = time.perf_counter()
model = train(train_set, ModelConfig(seed=0, epochs=epochs, loss_units="normalized"))
print(f"trained {epochs} epochs in {time.perf_counter() - t0:.0f} s, final loss {model.loss_curve[-1]:.2e}")
print("held-out records:", {k: round(v, 5) for k, v in evaluate(model, test_set).items()})
save_model(model, out / "model.json")
io.line_chart(out / "loss.svg", {"loss": (np.arange(1, epochs + 1), np.asarray(model.loss_curve))},
              "training loss", "epoch", "loss", logy=True)

# %%
# Closed loop on the two benchmark delays. The analytic controller runs as
# a shadow so every step also records the exact control.
s = np.linspace(0.0, 1.0, 41)
x0 = chebyshev_profile(s, amplitude=5.0, order=4.0, shift=0.2)
delays = {
    "D1": make_delay("cosine-chebyshev", {"offset": 3.0, "amplitude": 0.5, "order": 5.0}, s),
    "D2": make_delay("exponential", {"amplitude": 0.5, "rate": -1.6}, s),
}
for name, tau in delays.items():
    exact = AnalyticController(coeffs, tau)
    cfg = dict(dt=dt[name], T=20.0, snapshot_stride=int(round(0.1 / dt[name])))
    ref = simulate(coeffs, tau, x0, SimConfig(**cfg, controller=exact))
    nn = simulate(coeffs, tau, x0, SimConfig(**cfg, controller=NeuralController(model)), shadow=exact)
    t, e = state_error(nn, ref)
    n0 = nn.x_l2[0]
    print(f"{name}: ||x(20)||/||x0|| = {nn.x_l2[-1] / n0:.2e}, "
          f"state error at t=10 {e[np.argmin(abs(t - 10))] / n0:.1e}, at t=20 {e[-1] / n0:.1e}")
    rep = verify_envelope(nn, constants_for(exact.law))
    print(f"  max control gap {rep.epsilon:.2e}, envelope {'holds' if rep.passed else 'violated'}")
    noisy = simulate(coeffs, tau, x0, SimConfig(**cfg, controller=NeuralController(model),
                                                noise_sigma=0.05, noise_seed=1))
    print(f"  with 5% delay noise: peak {noisy.x_l2.max() / n0:.2f} ||x0||, end {noisy.x_l2[-1] / n0:.1e}")
    io.line_chart(out / f"neural_{name}.svg",
                  {"analytic": (ref.t, ref.x_l2), "neural": (nn.t, nn.x_l2), "neural, noisy": (noisy.t, noisy.x_l2)},
                  f"{name} closed loop", "t", "||x||", logy=True)

# %%
# The network replaces a kernel solve per step with one forward pass, so
# the gap widens as the grid is refined.
for row in bench_controllers([(delays["D2"], x0)], model, coeffs, reps=2):
    print(f"ds = {row.ds}: analytic {row.analytic_seconds:.3f} s, neural {row.neural_seconds:.4f} s, "
          f"speedup {row.speedup:.1f}x")
