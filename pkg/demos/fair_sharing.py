"""
Compute scheduling on a MEC host
================================

A host with capacity R = 100 instructions/s runs three apps that asked for
20, 30 and 50. Under segregation each app gets exactly what it asked for;
under fair sharing the busy apps split the whole host in proportion to
their requests.
"""

from mecsim.compute import FAIR_SHARING, SEGREGATION, MecHost, ResourceVector
from mecsim.engine import Engine

for mode in (SEGREGATION, FAIR_SHARING):
    host = MecHost("h1", ResourceVector(100, 1e9, 1e9), Engine(), scheduling=mode)
    a, b, c = (host.admit(ResourceVector(r)) for r in (20, 30, 50))

    ###########################################################################
    # Only ``a`` and ``b`` are busy; ``c`` is admitted but idle, so under fair
    # sharing its share is redistributed.
    host.compute(b, 1e6)
    done = host.compute(a, 80)
    print(f"{mode:12s} rate of a = {host.effective_rate(a):5.1f}/s, 80 instructions finish at {done:.2f} s")
