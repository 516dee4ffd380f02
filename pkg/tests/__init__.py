#!/usr/bin/env python3

import torch

from eio.archspec import parse_arch, make_scope, build_rgn_spec
from eio.data import DatasetDescriptor, synthetic_blobs
from eio.rgn import RGNModel


TOY_ARCH = """\
# three convs on 8x8 inputs, no skip connections
x input shape=3x8x8
c1 conv in=3 out=4 kernel=3 padding=1
b1 batchnorm features=4
r1 activation fn=relu
c2 conv in=4 out=4 kernel=3 padding=1
b2 batchnorm features=4
r2 activation fn=relu
p2 pool op=max kernel=2 stride=2
c3 conv in=4 out=8 kernel=3 padding=1
b3 batchnorm features=8
r3 activation fn=relu
gp pool op=avg global=1
fc linear in=8 out=3
y output
edge x c1
edge c1 b1
edge b1 r1
edge r1 c2
edge c2 b2
edge b2 r2
edge r2 p2
edge p2 c3
edge c3 b3
edge b3 r3
edge r3 gp
edge gp fc
edge fc y
"""

RESIDUAL_ARCH = """\
# one residual block on 8x8 inputs, average pooling only
x input shape=3x8x8
c0 conv in=3 out=4 kernel=3 padding=1
b0 batchnorm features=4
r0 activation fn=relu
c1 conv in=4 out=4 kernel=3 padding=1
b1 batchnorm features=4
r1 activation fn=relu
c2 conv in=4 out=4 kernel=3 padding=1
b2 batchnorm features=4
a2 add skip=r0
r2 activation fn=relu
gp pool op=avg global=1
fc linear in=4 out=3
y output
edge x c0
edge c0 b0
edge b0 r0
edge r0 c1
edge c1 b1
edge b1 r1
edge r1 c2
edge c2 b2
edge b2 a2
edge r0 a2
edge a2 r2
edge r2 gp
edge gp fc
edge fc y
"""

TOY_SHAPE = (3, 8, 8)
TOY_CLASSES = 3


def make_rgn(text=TOY_ARCH, n=2, scope="all", seed=0, dtype=torch.float64):
    arch = parse_arch(text, name="toy")
    spec = build_rgn_spec(arch, make_scope(arch, scope), n)
    return RGNModel(spec, seed=seed).to(dtype=dtype)


def toy_batch(batch=4, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand((batch,) + TOY_SHAPE, generator=gen, dtype=dtype)
    y = torch.randint(TOY_CLASSES, (batch,), generator=gen)
    return x, y


def toy_dataset(count=64, seed=0, dtype=torch.float64):
    descriptor = DatasetDescriptor(
            source="synthetic_blobs", classes=TOY_CLASSES, shape=TOY_SHAPE,
            count=count, seed=seed)
    split = synthetic_blobs(descriptor)
    return split.train.to(dtype=dtype), split.test.to(dtype=dtype)


RUN_CONFIG = """\
name = tiny
arch = {arch}
n = 2
seed = 1
output_dir = {output}
dtype = float64

data.source = synthetic_blobs
data.classes = 3
data.shape = 3, 8, 8
data.count = 60

train.pretrain_epochs = 1
train.epochs = 1
train.batch_size = 8
train.steps_per_epoch = 2
train.progress = false
train.distill.steps = 2

finetune.epochs = 1
finetune.batch_size = 8
finetune.steps_per_epoch = 1
finetune.progress = false

derive.count = 2

surrogates.count = 1
surrogates.epochs = 1
surrogates.batch_size = 8
surrogates.steps_per_epoch = 2
surrogates.progress = false

blackbox.methods = pgd, sgm
blackbox.losses = cross_entropy
blackbox.pgd_starts = 1
blackbox.steps = 2
whitebox.steps = 2
whitebox.starts = 2

eval.eps_grid = 0.0, 0.03
eval.n_samples = 8
eval.plots = false
"""


def write_config(root, arch_text=TOY_ARCH):
    """Tiny run config over an 8x8 architecture file, written under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    arch = root / "tiny.arch"
    arch.write_text(arch_text, encoding="ascii")
    path = root / "tiny.cfg"
    path.write_text(RUN_CONFIG.format(arch=arch, output=root / "run"), encoding="ascii")
    return path
