"""
Training on phantoms and reading the metrics
============================================

A short training run on a small balanced phantom set, followed by the
weighted one-vs-rest metric battery on held-out cases.  Takes a couple of
minutes on one CPU core.
"""
import numpy as np

from lacpanet import model as M
from lacpanet import phantom as P
from lacpanet import trainer as Tr

data = P.PhantomConfig()
train_cases = P.generate_cases(data, seed=10, per_class=6)
test_cases = P.generate_cases(data, seed=11, per_class=4)

# %%
# The learning rate follows a step schedule: divided by ten every 50 epochs.
schedule = Tr.TrainConfig()
print("lr at epochs 0, 49, 50, 150:", [Tr.lr_at(e, schedule) for e in (0, 49, 50, 150)])

# %%
# Train with a larger step so a few epochs are enough for the demo.
model_config = M.ModelConfig()
train_config = Tr.TrainConfig(epochs=8, lr=1e-3, seed=0)
result = Tr.train(train_cases, model_config, train_config)
print("epoch losses", np.round(result.epoch_losses, 3))

# %%
# Weighted AUC uses the class probabilities; precision, recall and F1 use
# the argmax prediction.
metrics = Tr.evaluate(result.params, model_config, test_cases)
print(metrics.table(P.SUBTYPE_NAMES))
print("confusion matrix (rows = true class)\n", metrics.confusion)
