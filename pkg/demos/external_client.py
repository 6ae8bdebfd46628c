"""
Talking to a running simulation over HTTP
=========================================

The gateway exposes the MEC system while the engine runs in real time.
Here a client thread discovers the Location Service through the registry
and then reads a UE position; each answer arrives only after the
simulated queueing and service time.
"""

import json
import threading
import time
import urllib.request

from mecsim.compute import MecHost, ResourceVector
from mecsim.engine import Engine
from mecsim.gateway import Gateway
from mecsim.lifecycle import MecSystem
from mecsim.ran import LinearMobility, Ran
from mecsim.servicequeue import ServiceTimeModel
from mecsim.services import LocationService

###############################################################################
# A one-cell world with a car driving at 15 m/s and a Location Service
# whose every answer takes 50 ms of simulated service time.

engine = Engine(seed=3)
ran = Ran(engine)
ran.add_cell("gnb1", (0, 0, 25))
ran.add_ue("car", mobility=LinearMobility((0, 0, 0), (15, 0, 0)))
system = MecSystem(engine, [MecHost("host1", ResourceVector(1e9, 1e9, 1e9), engine)], ran=ran)
system.add_service(LocationService(engine, ran, "host1",
                                   service_time=ServiceTimeModel(0.050, "constant")))
ran.start()


def get(url):
    with urllib.request.urlopen(url, timeout=5) as resp:
        return json.loads(resp.read())


def client(gateway):
    services = get(gateway.base_url + "/v1/mp1/services?ser_name=LocationService")
    location = services[0]["transportInfo"]["endpoint"]["uris"][0]
    for _ in range(3):
        t0 = time.monotonic()
        user = get(location + "/queries/users?ue_id=car")["users"][0]
        print(f"car at x = {user['position']['x']:6.2f} m "
              f"(answered in {1e3 * (time.monotonic() - t0):.0f} ms)")
        time.sleep(0.5)
    engine.stop()


###############################################################################
# Run the engine in real time on this thread; the client talks to it from
# another one.

with Gateway(system) as gateway:
    threading.Thread(target=client, args=(gateway,)).start()
    engine.run_realtime(pace=1.0, until=10.0)
