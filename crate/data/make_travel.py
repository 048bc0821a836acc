"""Writes the synthetic regional travel table (gravity model, monthly totals)."""
import csv
import math
import random

REGIONS = [
    ("Metro", 3400000, 39.74, -104.99),
    ("Northern", 700000, 40.45, -104.90),
    ("Central", 760000, 38.83, -104.82),
    ("Central Mountains", 210000, 39.60, -106.30),
    ("Northwest", 190000, 40.10, -108.20),
    ("South Central", 215000, 38.25, -104.60),
    ("East Central", 40000, 39.20, -103.00),
    ("San Luis Valley", 46000, 37.50, -106.00),
    ("Southeast", 48000, 37.90, -102.90),
    ("Southwest", 100000, 37.30, -107.90),
    ("West Central Partnership", 131795, 38.50, -107.90),
]
HOME_WEIGHT = 3.0e5
GRAVITY = 30.0
SCALE = 0.6


def km(a, b):
    dy = (a[2] - b[2]) * 111.0
    dx = (a[3] - b[3]) * 111.0 * math.cos(math.radians(0.5 * (a[2] + b[2])))
    return math.hypot(dx, dy)


def main():
    rng = random.Random(2020)
    with open("regions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["region", "population", "h_lim"])
        for name, pop, _, _ in REGIONS:
            w.writerow([name, pop, 8])
    with open("travel_2020.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["date", "origin", "destination", "visits"])
        for month in range(1, 13):
            season = 1.0 - 0.35 * math.exp(-((month - 4.5) ** 2) / 2.0)
            for dst in REGIONS:
                for org in REGIONS:
                    if org is dst:
                        base = dst[1] * HOME_WEIGHT
                    else:
                        base = dst[1] * org[1] * GRAVITY / (km(org, dst) + 30.0) ** 1.5 * season
                    visits = round(SCALE * base / 1e4 * rng.uniform(0.9, 1.1))
                    w.writerow([f"2020-{month:02d}-01", org[0], dst[0], visits])


if __name__ == "__main__":
    main()
