"""
A vehicle crossing a danger zone
================================

The bundled ``danger_zone`` scenario drives one car through a 20 m zone.
Its UE app starts the WarningAlert MEC app, which subscribes to the
Location Service and warns the car on entry and exit.
"""

from mecsim.experiments import experiment_danger_zone

###############################################################################
# Simulated mode runs in a few milliseconds and prints the message timeline.

report = experiment_danger_zone("sim")
for line in report.lines():
    print(line)
print("complete:", report.complete)

###############################################################################
# The same scenario in real time, with both apps outside the simulator:
# the UE app speaks UDP to the device app, the MEC app uses the HTTP API
# and receives HTTP callbacks. ``pace=5`` runs five simulated seconds per
# wall second.

live = experiment_danger_zone("realtime", pace=5.0)
print(f"real time: complete={live.complete}, {live.callbacks} HTTP callbacks, "
      f"{live.wall_time:.1f} s wall")
