"""Test oracles shared across modules."""

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode


class ActivationPattern(TorchFunctionMode):
    """Record which side of every kink a forward pass lands on.

    Covers relu, max_pool3d (argmax), abs (sign) and clamp (saturation). Two
    parameter settings with equal patterns lie on one smooth piece of the loss,
    so a central difference between them is a valid derivative estimate.
    """

    def __init__(self):
        super().__init__()
        self.parts = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        name = getattr(func, "__name__", "")
        out = func(*args, **kwargs)
        if name in ("relu", "relu_"):
            self.parts.append(out > 0)
        elif name == "max_pool3d":
            self.parts.append(F.max_pool3d(*args, **{**kwargs, "return_indices": True})[1])
        elif name == "abs":
            self.parts.append(args[0] >= 0)
        elif name == "clamp":
            self.parts.append(out == args[0])
        return out

    def same_as(self, other) -> bool:
        return len(self.parts) == len(other.parts) and all(
            torch.equal(a, b) for a, b in zip(self.parts, other.parts)
        )


def finite_difference_check(module, loss_fn, h=1e-6, per_tensor=None, directions=0, seed=0, analytic=None,
                            kink_aware=False):
    """Compare autograd gradients with central differences, per parameter tensor.

    ``per_tensor=None`` perturbs every scalar; an int samples that many entries.
    ``directions`` adds random directional-derivative checks over the whole
    tensor. Returns ``{name: relative error}`` where the error of a tensor is
    ``||fd - analytic|| / max(||fd||, ||analytic||)`` over the checked entries.

    ``analytic`` optionally supplies gradients computed elsewhere (e.g. by a
    float32 copy of ``module``), one tensor per parameter in order.

    With ``kink_aware`` the step is shrunk by 4x (at most 6 times) until the
    activation patterns at both ends match, so no difference straddles a kink.
    """
    rng = np.random.default_rng(seed)
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if analytic is None:
        grads = torch.autograd.grad(loss_fn(), [p for _, p in named])
    else:
        grads = [g.to(p.dtype) for g, (_, p) in zip(analytic, named)]
    errors = {}

    def evaluate(p, value):
        with torch.no_grad():
            p.copy_(value)
        if not kink_aware:
            return loss_fn().item(), None
        with ActivationPattern() as pattern:
            out = loss_fn().item()
        return out, pattern

    def central(p, delta):
        base = p.detach().clone()
        step = h
        for _ in range(7):
            up, pu = evaluate(p, base + delta * (step / h))
            down, pd = evaluate(p, base - delta * (step / h))
            if not kink_aware or pu.same_as(pd):
                break
            step /= 4
        with torch.no_grad():
            p.copy_(base)
        return (up - down) / (2 * step)

    for (name, p), g in zip(named, grads):
        n = p.numel()
        idx = np.arange(n) if per_tensor is None or per_tensor >= n else rng.choice(n, per_tensor, replace=False)
        fd, an = [], []
        for i in idx:
            delta = torch.zeros_like(p).view(-1)
            delta[int(i)] = h
            fd.append(central(p, delta.view_as(p)))
            an.append(g.reshape(-1)[int(i)].item())
        for _ in range(directions):
            v = torch.from_numpy(rng.standard_normal(p.shape)).to(p.dtype)
            fd.append(central(p, h * v))
            an.append((g * v).sum().item())
        fd, an = np.array(fd), np.array(an)
        scale = max(np.linalg.norm(fd), np.linalg.norm(an))
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(fd - an) / scale)
    return errors
