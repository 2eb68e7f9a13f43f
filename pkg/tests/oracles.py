"""Independent scalar reference implementations used as test oracles.

Plain Python loops over nested lists, no numpy or torch, so they share no
code path with the package.
"""
import math


def dice_loss_ref(y, F, eps=1e-7, skip_background=False):
    """y, F: lists [class][voxel]."""
    C = len(y)
    first = 1 if skip_background else 0
    total = 0.0
    for i in range(first, C):
        inter = 0.0
        denom = 0.0
        for k in range(len(y[i])):
            inter += y[i][k] * F[i][k]
            denom += y[i][k] ** 2 + F[i][k] ** 2
        total += inter / (denom + eps)
    return 1.0 - 2.0 / (C - first) * total


def cross_entropy_ref(y, F, eps=1e-7):
    n = len(y[0])
    s = 0.0
    for i in range(len(y)):
        for k in range(n):
            f = min(max(F[i][k], eps), 1.0)
            s -= y[i][k] * math.log(f)
    return s / n


def mixed_ref(y, F, lam, eps=1e-7):
    return lam * cross_entropy_ref(y, F, eps) + (1 - lam) * dice_loss_ref(y, F, eps)


def hard_dice_ref(a, b):
    """a, b: flat lists of booleans."""
    na = sum(1 for x in a if x)
    nb = sum(1 for x in b if x)
    if na + nb == 0:
        return 1.0
    both = sum(1 for x, z in zip(a, b) if x and z)
    return 2.0 * both / (na + nb)


def eight_voxel_example():
    """C=8; all 8 voxels are class 0; F puts 0.5 on class 0 and 0.5/7 on each other class."""
    C, n = 8, 8
    y = [[1.0 if i == 0 else 0.0 for _ in range(n)] for i in range(C)]
    F = [[0.5 if i == 0 else 0.5 / 7 for _ in range(n)] for i in range(C)]
    return y, F


# Frozen result of dice_loss_ref(*eight_voxel_example()), recorded when the
# oracle was first written: 1 - (2/8) * 4 / (10 + 1e-7)
EIGHT_VOXEL_DICE_LOSS = 0.900000001


def welch_ref(a, b):
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    dof = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, dof
