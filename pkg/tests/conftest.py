import numpy as np
import pytest

from koopplan import diku, systems


@pytest.fixture(scope="session")
def di_spec():
    return systems.get_system("double_integrator")


@pytest.fixture(scope="session")
def tiny_model():
    """Small untrained model on the double integrator (n=2, d=2)."""
    return diku.create_model(2, 1, 2, hidden_coupling=(8,), hidden_encoder=(8,),
                             seed=3)


@pytest.fixture(scope="session")
def small_di_model(di_spec):
    """A briefly trained double-integrator model, good enough for the
    reachability and planner unit tests (not the acceptance gates)."""
    ds = systems.generate_dataset(di_spec, (200, 50, 50), 100, seed=11)
    model = diku.create_model(di_spec.n, di_spec.m, None, seed=0,
                              system="double_integrator")
    cfg = diku.TrainConfig(k_steps=15, gamma=0.9, lr=1e-3, batch=1024,
                           epochs=40, seed=0)
    return diku.train(model, ds, cfg).model


def rollout_error(model, traj, horizon=100):
    X, U = traj.states[: horizon + 1], traj.controls[:horizon]
    fwd = diku.rollout_forward(model, X[0], U)
    bwd = diku.rollout_backward(model, X[-1], U)
    return (np.abs(fwd - X[1:]).max(), np.abs(bwd - X[:-1]).max())
