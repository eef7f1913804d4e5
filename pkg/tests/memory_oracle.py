"""Stand-alone transcription of the training-memory equations.

Deliberately shares no code with ``moeplan``: plain ints and Fractions, one
function per equation, all layers treated as MoE layers. Values that come out
fractional (expected token counts) are ceiled to whole bytes at the very end.
"""

from fractions import Fraction as F
from math import ceil


def undivided(d, L, H, E, k, dffn, b, s):
    return L * (64 * d * d + 48 * E * d * dffn + 12 * b * s * d
                + 4 * H * b * s * s + 2 * b * s * k * (3 * dffn + d))


def edp(d, L, H, E, k, dffn, b, s, EP):
    return L * (64 * d * d + F(48 * E, EP) * d * dffn + 12 * b * s * d
                + 4 * H * b * s * s + F(2 * b * s * k, EP) * (3 * dffn + d))


def gpipe(d, L, H, E, k, dffn, b, s, PP, EP):
    return F(L, PP) * (64 * d * d + F(48 * E, EP) * d * dffn + 12 * b * s * d
                       + 4 * H * b * s * s + F(2 * b * s * k, EP) * (3 * dffn + d))


def ofob(d, L, H, E, k, dffn, b, s, PP, EP, M, i):
    inflight = (F(12 * b, M) * s * d + F(4 * b, M) * H * s * s
                + F(2 * b * s * k, M * EP) * (3 * dffn + d))
    return F(L, PP) * (64 * d * d + F(48 * E, EP) * d * dffn + (PP - i) * inflight)


def skew(d, L, H, E, k, dffn, b, s, PP, EP, M):
    return F(L * (PP - 1), PP) * (F(12 * b, M) * s * d + F(4 * b, M) * H * s * s
                                  + F(2 * b * s * k, M * EP) * (3 * dffn + d))


def to_bytes(x):
    return ceil(F(x))


if __name__ == "__main__":
    tiny = dict(d=4, L=2, H=2, E=4, k=1, dffn=8, b=1, s=2)
    print("undivided", to_bytes(undivided(**tiny)))
    print("edp ep=2", to_bytes(edp(**tiny, EP=2)))
    print("gpipe pp=2 ep=2", to_bytes(gpipe(**tiny, PP=2, EP=2)))
    for i in range(2):
        print("1f1b stage", i, to_bytes(ofob(**tiny, PP=2, EP=2, M=2, i=i)))
    print("skew", to_bytes(skew(**tiny, PP=2, EP=2, M=2)))
