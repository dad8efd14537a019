"""Time the scan path at doubling sequence lengths.

A linear-time scan should roughly double its wall time each step. Absolute
numbers depend on the machine, which is recorded alongside the timings.

    python demos/05_scan_scaling.py
"""

from groupsurv.cli import bench_scan

report = bench_scan([1000, 2000, 4000, 8000, 16000])
for row in report["rows"]:
    ratio = row.get("time_ratio_per_doubling")
    print(f"T={row['length']:6d}  {1e3 * row['seconds']:8.2f} ms  "
          f"transient {row['transient_bytes'] / 2**20:7.1f} MiB"
          + (f"  x{ratio:.2f} per doubling" if ratio else ""))
print("worst ratio per doubling:", round(report["max_ratio_per_doubling"], 2))
print("machine:", report["machine"]["platform"], "threads", report["machine"]["torch_threads"])
