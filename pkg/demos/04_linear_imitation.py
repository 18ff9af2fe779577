"""Recover a linear system's dynamics by imitating its LQR controller.

A randomly drawn stable linear teacher produces optimal demonstrations.
The student starts from fresh random internal models and is trained so its
sampled plans match the demos; nothing ever tells it the true F and G,
yet matching the control law pulls its internal dynamics toward them.

Scaled down for a quick run (about two minutes); the library-scale
settings live in the CLI defaults.
"""
import numpy as np

from picontrol.core import PIHyperParams, RngStream
from picontrol.envs import sample_linear_teacher
from picontrol.training import (build_linear_dataset, init_linear_models,
                                train_pinet)

np.set_printoptions(precision=3, suppress=True)
root = RngStream(11)

teacher = sample_linear_teacher(root.child(1), dt=0.01)
train, test = build_linear_dataset(teacher, root.child(0),
                                   n_train=24, n_test=8, horizon=20)
hp = PIHyperParams(lambda_=0.01, nu=1500.0, sigma=0.2,
                   num_samples=20, horizon=20, recurrences=10)
models = init_linear_models(root.child(2))

def dynamics_gap():
    params = models.dynamics.get_params()
    f_gap = np.linalg.norm(params[:16].reshape(4, 4) - teacher.F)
    g_gap = np.linalg.norm(params[16:24].reshape(4, 2) - teacher.G)
    return f_gap, g_gap

f0, g0 = dynamics_gap()
print(f"before training: |F - F*| {f0:.3f}, |G - G*| {g0:.3f}")

history = train_pinet(models, hp, train, test, "open_loop", epochs=8,
                      batch_size=8, loss_weights={"ctrl": 1.0, "cost": 0.0},
                      rng=root.child(3))

print("\nepoch  train ctrl   test ctrl")
for row in history:
    print(f"{row['epoch']:4d}   {row['train_ctrl']:9.4f}   {row['test_ctrl']:9.4f}")

f1, g1 = dynamics_gap()
print(f"\nafter training:  |F - F*| {f1:.3f}, |G - G*| {g1:.3f}")
print(f"test control loss fell {history[0]['test_ctrl'] / history[-1]['test_ctrl']:.1f}x")
