# coding: utf-8

# # Measuring how much a model's predictions know about the subgroup
#
# The variational estimate trains a small per-class head to guess the
# subgroup and reports H(Z|Y) minus its cross-entropy.

# In[1]:

import numpy as np

from patchlab.data import generate_coupled_world, sample_dataset
from patchlab.invariance import HeadConfig, cdat_train, one_hot, prediction_mi_estimate, variational_mi_estimate
from patchlab.training import TrainConfig, make_model, train_model


# Features that copy the subgroup carry log 2 nats; features that only know
# the class carry none.

# In[2]:

rng = np.random.default_rng(0)
y, z = rng.integers(2, size=4000), rng.integers(2, size=4000)
print(variational_mi_estimate(one_hot(z, 2), y, z, HeadConfig(epochs=500)), np.log(2))
print(variational_mi_estimate(one_hot(y, 2), y, z, HeadConfig(epochs=500)))


# A model trained with ERM on correlated data leaks the subgroup into its
# predictions. Adversarial training against a gradient-reversed subgroup
# head reduces the leak.

# In[3]:

world = generate_coupled_world(latents_per_class=1500, input_dim=8, seed=0, class_dims=2,
                               class_separation=2.5)
split = sample_dataset(world, 2000, 0.95, seed=0, n_test=400)
cfg = TrainConfig(method="ERM", epochs=10, hidden=(16,))
erm = train_model(make_model(8, 2, (16,), 0), split, cfg).model
cdat, trace = cdat_train(make_model(8, 2, (16,), 0), split, 1.0, config=cfg)
print("ERM ", prediction_mi_estimate(erm, split.test, HeadConfig(epochs=300)))
print("CDAT", prediction_mi_estimate(cdat, split.test, HeadConfig(epochs=300)))
