"""
Freezing integration weights mid-training
=========================================

Train a model, freeze each block's 1x1 integration weight as a fixed prior,
keep training only the increment, and look at what the increment learned.
"""

import copy

import numpy as np

from mobileie import Adam, MobileIENet, ModelConfig, TrainConfig, train
from mobileie.dataio import synthetic_dataset
from mobileie.metrics import kernel_delta, kl_channel_matrix

x, y = synthetic_dataset(16, 32, task="LLE", seed=3)
base = dict(total_epochs=120, warmup_epochs=5, restart_period=25, batch_size=8, seed=3)

net = MobileIENet.init(ModelConfig(channels=8), seed=3)
opt = Adam()
train(net, x, y, TrainConfig(**base, iwo_freeze_epoch=None), optimizer=opt, end_epoch=80)

# branch the run: (a) keep going, (b) freeze first
plain, frozen = copy.deepcopy(net), copy.deepcopy(net)
loss_a = train(plain, x, y, TrainConfig(**base, iwo_freeze_epoch=None),
               start_epoch=80, optimizer=copy.deepcopy(opt))
loss_b = train(frozen, x, y, TrainConfig(**base, iwo_freeze_epoch=80),
               start_epoch=80, optimizer=copy.deepcopy(opt))
print(f"final loss  plain {loss_a[-1].train_loss:.5f}   frozen+increment {loss_b[-1].train_loss:.5f}")

# after the freeze only the increment moves; the prior is untouched
head = frozen.head
print("head prior norm", round(float(np.linalg.norm(head.w_pre)), 3),
      " increment norm", round(float(np.linalg.norm(head.w_learn)), 3))

# how different the two branches' head kernels ended up
delta = kernel_delta(frozen.head.w_final, plain.head.w_final).delta
print("head integration delta: max |dW| =", f"{np.abs(delta).max():.3e}")

# channel redundancy: softmax each output row, then pairwise KL
kl = kl_channel_matrix(frozen.body[0].w_final)
off = kl[~np.eye(len(kl), dtype=bool)]
print(f"body0 channel KL: min {off.min():.3f}  median {np.median(off):.3f}  max {off.max():.3f}")
