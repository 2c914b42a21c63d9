"""Eight-link bond, one member killed, duplicates injected on re-forward.

The ideal simulator never duplicates a frame. Turning on injection makes
the controller emit extra copies of the first frame it re-forwards after a
member dies, which is enough for the anomaly scan to pick them up.
"""

from lagsim import run_scenario

for inject in ("none", "duplicate-on-reforward"):
    report = run_scenario("topo8", inject=inject, inject_count=3)
    a = report.anomaly
    print(f"inject={inject}: injected {report.injected_duplicates}, "
          f"scan counted {a.duplicate_count}, reordered {a.reorder_count}")
    for conv in a.duplicate_conversations:
        print("   flagged", conv)
    for claim, status, why in report.claim_statuses():
        print(f"   {claim}: {status} ({why})")
