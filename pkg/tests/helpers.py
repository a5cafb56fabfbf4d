"""Shared test utilities: finite-difference gradient checking and toy data."""

import numpy as np
import torch
from torch import nn


def randomize(model: nn.Module, seed: int, scale: float = 0.05) -> nn.Module:
    """Overwrite every parameter (including zero-initialized tails) so all
    gradient paths are active."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.empty_like(p).uniform_(-scale, scale, generator=gen))
    return model


def central_difference(loss_fn, tensor, index, h):
    with torch.no_grad():
        orig = tensor.view(-1)[index].item()
        tensor.view(-1)[index] = orig + h
        up = float(loss_fn())
        tensor.view(-1)[index] = orig - h
        down = float(loss_fn())
        tensor.view(-1)[index] = orig
    return (up - down) / (2.0 * h)


def check_gradients(loss_fn, leaves, n_checks=50, h=1e-4, rtol=1e-4, seed=0):
    """Compare reverse-mode gradients against central finite differences on
    randomly chosen components of the leaf tensors (float64)."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, leaves)
    rng = np.random.default_rng(seed)
    sizes = [leaf.numel() for leaf in leaves]
    total = sum(sizes)
    checked = 0
    for flat in rng.choice(total, size=min(n_checks, total), replace=False):
        li, offset = 0, int(flat)
        while offset >= sizes[li]:
            offset -= sizes[li]
            li += 1
        fd = central_difference(loss_fn, leaves[li], offset, h)
        ad = grads[li].reshape(-1)[offset].item()
        # atol floor covers float64 FD roundoff (~eps/h) on near-zero grads
        assert abs(fd - ad) <= rtol * max(abs(fd), abs(ad)) + 1e-9, (
            f"leaf {li} component {offset}: fd={fd:.8e} ad={ad:.8e}"
        )
        checked += 1
    assert checked > 0
