"""Kill one member of a two-link bond and watch the clients ride it out.

Three clients ping the bonded server. The hash puts two of them on one
member and the third on the other. At t=30 s member 1 goes dark; the run
shows who noticed and how long it took them to get back to normal RTTs.
"""

from lagsim import run_scenario

report = run_scenario("topo2")

print("flow table before the kill:")
for entry in report.flows_before:
    print("  ", entry.csv_row())

print("\nconversations moved off the dead member:", ", ".join(report.remapped_hosts) or "none")
print(f"detection complete at {report.detection_complete / 1e6:.3f} s")
for host, delay in sorted(report.failover.items()):
    print(f"  {host}: failover delay {delay} s (bound {report.failover_bound:.3f} s)")

for host, series in sorted(report.rtt.items()):
    answered = [s.value for s in series if not s.lost]
    print(f"{host}: {len(series)} pings, {sum(s.lost for s in series)} lost, "
          f"best rtt {min(answered) * 1e3:.3f} ms")

print()
print(report.summary_text())
