"""Generate the bundled synthetic temperature extract.

Forty sensors, one reading roughly every minute, three hours of a spring
morning: a shared warming trend, two passing cloud dips, per-sensor offsets
and noise.  Layout matches an opensensemap export reduced to
``sensor_id,timestamp,temperature``.
"""
from __future__ import annotations

import argparse
import csv
import math
import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

START = datetime(2019, 3, 23, 9, 0, tzinfo=timezone.utc)


def shared_signal(t: float) -> float:
    hours = t / 3600
    trend = 6.0 + 3.2 * hours  # morning warming
    dips = -2.6 * math.exp(-((t - 2400) / 420) ** 2) - 2.2 * math.exp(-((t - 6900) / 600) ** 2)
    return trend + dips + 0.5 * math.sin(2 * math.pi * t / 1500)


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("src/chainmon/data/synthetic_temperatures.csv"))
    ap.add_argument("--sensors", type=int, default=40)
    ap.add_argument("--hours", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=20190323)
    args = ap.parse_args(argv)

    rng = random.Random(args.seed)
    rows = []
    for k in range(args.sensors):
        sid = f"5c9{rng.getrandbits(84):021x}"
        offset = rng.gauss(0, 0.6)
        t = rng.uniform(0, 60)
        drift = 0.0
        while t < args.hours * 3600:
            drift = 0.9 * drift + rng.gauss(0, 0.12)
            temp = shared_signal(t) + offset + drift + rng.gauss(0, 0.1)
            stamp = START + timedelta(seconds=t)
            rows.append((stamp, sid, round(temp, 2)))
            t += 60 + rng.uniform(-4, 4)
    rows.sort()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "timestamp", "temperature"])
        for stamp, sid, temp in rows:
            w.writerow([sid, stamp.isoformat(timespec="milliseconds").replace("+00:00", "Z"), f"{temp:.2f}"])


if __name__ == "__main__":
    main()
