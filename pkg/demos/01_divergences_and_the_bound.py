# coding: utf-8

# # Divergences, coupled worlds and the invariance bound
#
# Everything here is exact: the worlds are finite, so every mutual
# information is a sum over an enumerated table.

# In[1]:

import numpy as np

from patchlab import divergences as dv
from patchlab.data import generate_coupled_world
from patchlab.invariance import coupled_mi_as_jsd, verify_theorem1
from patchlab.suites import random_imperfect_translators, random_model
from patchlab.translate import analytic_translators


# Two disjoint point masses are as far apart as the JSD allows.

# In[2]:

print(dv.jsd([[1, 0], [0, 1]]), np.log(2))


# The JSD of a mixture's components is the mutual information between the
# component index and a draw from the mixture.

# In[3]:

rng = np.random.default_rng(0)
comps = rng.dirichlet(np.ones(5), size=3)
print(dv.jsd(comps), dv.mixture_mutual_information(comps))


# The best discriminator between p and q scores JSD(p, q) - log 2.

# In[4]:

p, q = comps[0], comps[1]
print(dv.optimal_discriminator_loss(p, q), dv.jsd([p, q]) - np.log(2))


# A coupled world renders each latent once per subgroup. Two classes, two
# subgroups and four latents per class give sixteen inputs in eight
# coupled sets.

# In[5]:

world = generate_coupled_world(2, 2, 4, 4, seed=0)
examples, probs = world.enumerate()
print(len(examples), len(set(examples.coupled_id.tolist())))


# For any model, the conditional MI between its prediction and the subgroup
# given the coupled set equals the expected JSD of the predictions on each
# coupled set.

# In[6]:

model = random_model(world, rng)
print(coupled_mi_as_jsd(model, world))


# The bound holds with equality when the translators are exact ...

# In[7]:

exact = verify_theorem1(model, world, analytic_translators(world))
print(exact.lhs, exact.rhs)


# ... and leaves non-negative slack when they are not.

# In[8]:

rough = verify_theorem1(model, world, random_imperfect_translators(world, rng))
print(rough.lhs, rough.rhs, rough.slack)
