"""Hawkes versus delayed excitation in the Markovian reference model.

Both modes share the same stationary means, but their laws differ: the
intensity variance is smaller under delay and P(Q = 0) is larger under
instantaneous excitation.  Everything here is exact (no simulation).
"""
from hawkeslab.model import Kernel, NetworkModel
from hawkeslab.moments import stationary_moments
from hawkeslab.transform import fixed_point_transform


def build(mode, r=2.0):
    return NetworkModel.univariate(1.0, Kernel.exponential(r), mode=mode)


for r in (2.0, 1.25):
    print(f"kernel rate r = {r}")
    for mode in ("hawkes", "delayed"):
        m = stationary_moments(build(mode, r), 2)
        eq, el = m[((1,), (0,))], m[((0,), (1,))]
        var_l = m[((0,), (2,))] - el ** 2
        print(f"  {mode:8s} E[Q]={eq:.4f}  E[Lam]={el:.4f}  Var[Lam]={var_l:.4f}")

print("\nP(Q(t) = 0)")
for t in (1.0, 2.0, 5.0, 20.0):
    h = fixed_point_transform(build("hawkes"), t, 0.0, 0.0)
    d = fixed_point_transform(build("delayed"), t, 0.0, 0.0)
    print(f"  t={t:5.1f}  hawkes {h:.4f}  delayed {d:.4f}")
