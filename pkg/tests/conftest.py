import numpy as np
import pytest
import torch

from airlabel.tree import BranchNode, Nomenclature, build_tree

torch.set_default_dtype(torch.float64)


def random_tree(rng: np.random.Generator, n: int, nomenclature=None, shuffle=True):
    """Random recursive tree with ids optionally permuted; geometry chained from parents."""
    parents = [None] + [int(rng.integers(i)) for i in range(1, n)]
    perm = rng.permutation(n) if shuffle else np.arange(n)
    inv = np.argsort(perm)  # new id -> old id
    ends = {}
    order = list(range(n))  # old ids in creation order, parents first
    for old in order:
        p = parents[old]
        start = np.zeros(3) if p is None else ends[p][1]
        ends[old] = (start, start + rng.normal(size=3) + np.array([0.0, 0.0, -0.5]))
    nodes = []
    for new in range(n):
        old = int(inv[new])
        p = parents[old]
        start, end = ends[old]
        nodes.append(
            BranchNode(
                id=new,
                parent=None if p is None else int(perm[p]),
                start_point=tuple(start),
                end_point=tuple(end),
                label_lob=0,
                label_seg=0,
                label_sub=0,
            )
        )
    return build_tree(nodes, nomenclature)


def chain(n, labels=None):
    nodes = []
    for i in range(n):
        lob, seg, sub = labels[i] if labels else (0, 0, 0)
        nodes.append(
            BranchNode(i, None if i == 0 else i - 1, (0, 0, -i), (0, 0, -i - 1), lob, seg, sub)
        )
    return nodes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_nom():
    # lob: 0 trunk, 1 lobe; seg: 0 trunk, 1 lobe stem, 2-3 segments; sub: 0-3 stems, 4-7 subsegments
    return Nomenclature(
        n_lob=2,
        n_seg=4,
        n_sub=8,
        sub_to_seg=(0, 1, 2, 3, 2, 2, 3, 3),
        seg_to_lob=(0, 1, 1, 1),
        proper_segment_ids=(2, 3),
    )


def central_fd(fn, tensor, eps=1e-5, indices=None):
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``tensor`` (in place perturbation)."""
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.zeros(flat.numel(), dtype=tensor.dtype)
    with torch.no_grad():
        for k in idx:
            orig = flat[k].item()
            flat[k] = orig + eps
            up = fn().item()
            flat[k] = orig - eps
            down = fn().item()
            flat[k] = orig
            out[k] = (up - down) / (2 * eps)
    return out.view_as(tensor)


def rel_err(analytic, numeric, floor=1e-8):
    a = analytic.reshape(-1).double()
    n = numeric.reshape(-1).double()
    denom = max(a.norm().item(), n.norm().item(), floor)
    return (a - n).norm().item() / denom


def gradcheck_module(loss_fn, tensors, eps=1e-5, sample=None, seed=0):
    """Max relative error between autograd and central differences over ``tensors``.

    ``tensors`` is a dict name -> leaf tensor requiring grad. With ``sample``
    only that many entries per tensor are compared: half are the largest
    analytic entries, so the error is not measured against pure FD round-off,
    the rest are drawn at random.
    """
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    g = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.detach().clone().view(-1)
        n = t.numel()
        if sample is None or sample >= n:
            idx = list(range(n))
        else:
            top = np.argsort(-analytic.abs().numpy(), kind="stable")[: sample // 2]
            rest = np.setdiff1d(np.arange(n), top)
            idx = sorted(set(top.tolist()) | set(g.choice(rest, sample - len(top), replace=False).tolist()))
        numeric = central_fd(loss_fn, t, eps, idx).view(-1)
        errors[name] = rel_err(analytic[idx], numeric[idx])
    return errors


# -- acceptance summary ----------------------------------------------------------

CRITERIA: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
