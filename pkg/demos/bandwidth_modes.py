"""Bulk transfers under the two bandwidth models.

In per-link mode each member is its own 10 Mbit/s pipe, so flows hashed to
different members each get the full rate. In shared mode the bond is one
pooled pipe and the rate divides by the number of flows.
"""

from lagsim import run_scenario

for mode in ("per-link", "shared"):
    for links, clients in ((2, 2), (8, 8)):
        report = run_scenario("custom", links=links, clients=clients, mode=mode,
                              bulk=True, pings=False, duration=8)
        v = report.fairness
        rates = ", ".join(f"{h}={r / 1e6:.2f}" for h, r in sorted(v.rates.items()))
        print(f"{mode:8s} L={links} N={clients}: target {v.target / 1e6:.2f} Mb/s "
              f"-> {'ok' if v.passed else 'off'}  [{rates}]")
