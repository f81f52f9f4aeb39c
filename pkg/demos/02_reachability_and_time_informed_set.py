"""Sampling-based reachability and the time-informed set.

Uses the surrogate model to (a) build a forward reachable tube from a start
state, (b) inflate it adversarially, (c) backcast a backward reachable tube
from a goal set until the start state is covered — which yields a minimum
time-cost estimate — and (d) assemble the paired time-informed set whose
time slices contain every trajectory at least as fast as that estimate.

Expects the model from demos/01_train_and_predict.py (run that first, or any
saved model path via the MODEL environment variable).

Run:  python3 demos/02_reachability_and_time_informed_set.py
"""

import os
import time

import numpy as np

from koopplan import diku, systems
from koopplan.geometry import hull_2d, polygon_area
from koopplan.reachability import (InitialSet, adversarial_inflate, build_tis,
                                   propagate, sample_tuples)

spec = systems.get_system("double_integrator")
model = diku.load_model(os.environ.get("MODEL", "/tmp/demo_di.diku"))
rng = np.random.default_rng(7)

# --- forward reachable tube from a point start ------------------------------
start = InitialSet("point", np.zeros(2))
steps = 20  # 1 second
X0, U = sample_tuples(start, spec, M=500, horizon_steps=steps, rng=rng)
t0 = time.perf_counter()
frt = propagate((X0, U), steps, "forward", model=model, spec=spec, dt=spec.dt)
t_basic = time.perf_counter() - t0
t0 = time.perf_counter()
frt_inf = adversarial_inflate(frt, start, model, spec, eta=0.015)
t_inf = time.perf_counter() - t0
a0 = polygon_area(hull_2d(frt.slices[steps]))
a1 = polygon_area(hull_2d(frt_inf.slices[steps]))
print(f"forward tube: basic {t_basic*1e3:.0f} ms, inflated {t_inf*1e3:.0f} ms")
print(f"slice area at t=1s: basic {a0:.4f} -> inflated {a1:.4f} "
      f"(inflation can only grow a slice)")

# --- time-informed set ------------------------------------------------------
goal = InitialSet("box", [0.7, 0.0], half_widths=[0.25, 0.25])
t0 = time.perf_counter()
tis = build_tis(np.zeros(2), goal, model, spec, M=500, rng=rng)
print(f"\ntime-informed set built in {time.perf_counter()-t0:.1f} s; "
      f"minimum-time estimate {tis.cost:.2f} s ({tis.n_steps} slices)")

# Forward slice k pairs with backward slices 0..n-k; a state belongs to the
# region at time k*dt if it is in the forward hull and some admissible
# backward hull (each fattened by the model-uncertainty margin).
k = tis.n_steps // 2
print(f"at k={k}: admissible backcast depths 0..{tis.max_backward_index(k)}")
anchor = tis.forward.anchor(k)
print(f"anchor state {np.round(anchor, 3)} member of slice {k}: "
      f"{tis.slice_membership(anchor, k)}")

# Draw a uniform sample from one forward/backward slice intersection — this
# is the heuristic sampler the informed planner uses.
x = tis.sample_in_pair(k, tis.max_backward_index(k), rng)
print(f"hit-and-run sample from pair (k={k}, j={tis.max_backward_index(k)}): "
      f"{np.round(x, 3)}; member: {tis.slice_membership(x, k)}")
