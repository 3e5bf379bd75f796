"""Synthetic hourly building-meter dataset for replays and benchmarks.

Shape: 1,449 buildings spread over 16 weather sites, each reporting one
electricity reading per hour.  Per-building attributes (use category,
size, age, floors) are constant across a building's rows; weather
attributes are shared by every row of the same site and hour.  The
reading itself is the sensitive attribute.  Everything is drawn from a
seeded generator, so a (rows, seed) pair always produces the same file,
byte for byte.

``default_rules_document`` returns the matching rules-plus-mapping JSON
object: every static and weather column is an interval quasi-identifier,
the use category is a hierarchy quasi-identifier, the reading passes
through as sensitive, and the timestamp column doubles as an interval
quasi-identifier parsed from its datetime form.
"""

from __future__ import annotations

import csv
import random
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterator

COLUMNS = (
    "building_id",
    "timestamp",
    "meter_reading",
    "primary_use",
    "square_feet",
    "year_built",
    "floor_count",
    "air_temperature",
    "cloud_coverage",
    "dew_temperature",
    "precip_depth_1_hr",
    "sea_level_pressure",
    "wind_direction",
    "wind_speed",
)

BUILDING_IDS = tuple(range(565, 654))  # 89 buildings

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M"

PRIMARY_USE_HIERARCHY: dict[str, Any] = {
    "label": "any",
    "children": [
        {
            "label": "Institutional",
            "children": [
                {"label": "Education"},
                {"label": "Healthcare"},
                {"label": "Public services"},
            ],
        },
        {
            "label": "Commercial",
            "children": [{"label": "Office"}, {"label": "Entertainment"}],
        },
        {"label": "Residential", "children": [{"label": "Lodging"}]},
        {"label": "Infrastructure", "children": [{"label": "Parking"}]},
    ],
}

PRIMARY_USE_LEAVES = (
    "Education",
    "Healthcare",
    "Public services",
    "Office",
    "Entertainment",
    "Lodging",
    "Parking",
)

METER_READING_MAX = 2293.88


def generate_rows(rows: int, seed: int = 7) -> Iterator[tuple]:
    """Yield ``rows`` data rows (without header) in timestamp order."""
    rng = random.Random(seed)
    static = {
        b: (
            rng.choice(PRIMARY_USE_LEAVES),
            rng.randrange(300, 875001),  # square_feet
            rng.randrange(1900, 2018),  # year_built
            rng.randrange(1, 27),  # floor_count
        )
        for b in BUILDING_IDS
    }
    clock = datetime(2016, 1, 1, 0, 0)
    produced = 0
    while produced < rows:
        weather = (
            round(rng.uniform(-28.9, 47.2), 1),  # air_temperature
            float(rng.randrange(0, 10)),  # cloud_coverage
            round(rng.uniform(-35.0, 26.1), 1),  # dew_temperature
            float(rng.randrange(0, 344)),  # precip_depth_1_hr
            round(rng.uniform(968.2, 1045.5), 1),  # sea_level_pressure
            float(rng.randrange(0, 361)),  # wind_direction
            round(rng.uniform(0.0, 19.0), 1),  # wind_speed
        )
        order = list(BUILDING_IDS)
        rng.shuffle(order)
        stamp = clock.strftime(TIMESTAMP_FORMAT)
        for b in order:
            if produced >= rows:
                return
            use, square_feet, year_built, floor_count = static[b]
            yield (
                b,
                stamp,
                round(rng.uniform(0.0, METER_READING_MAX), 3),
                use,
                square_feet,
                year_built,
                floor_count,
                *weather,
            )
            produced += 1
        clock += timedelta(hours=1)


def write_sample_csv(path: str | Path, rows: int = 20000, seed: int = 7) -> Path:
    """Write the dataset to ``path`` and return it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(generate_rows(rows, seed))
    return path


def default_rules_document() -> dict[str, Any]:
    """Rules + column mapping matching :data:`COLUMNS`, as a JSON object."""
    attribute_columns = list(COLUMNS[1:])
    interval_columns = [
        "timestamp",
        "square_feet",
        "year_built",
        "floor_count",
        "air_temperature",
        "cloud_coverage",
        "dew_temperature",
        "precip_depth_1_hr",
        "sea_level_pressure",
        "wind_direction",
        "wind_speed",
    ]
    rules: list[dict[str, Any]] = []
    for name in interval_columns:
        rules.append(
            {
                "index": attribute_columns.index(name),
                "kind": "interval",
                "quasiIdentifier": True,
            }
        )
    rules.append(
        {
            "index": attribute_columns.index("meter_reading"),
            "kind": "passthrough",
            "sensitive": True,
        }
    )
    rules.append(
        {
            "index": attribute_columns.index("primary_use"),
            "kind": "dgh",
            "metric": "glm",
            "quasiIdentifier": True,
            "hierarchy": PRIMARY_USE_HIERARCHY,
        }
    )
    rules.sort(key=lambda r: r["index"])
    return {
        "rules": rules,
        "mapping": {
            "subjectKeyColumn": "building_id",
            "timestampColumn": "timestamp",
            "attributeColumns": attribute_columns,
            "numericColumns": [
                c for c in attribute_columns if c not in ("primary_use", "timestamp")
            ],
            "datetimeColumns": {"timestamp": TIMESTAMP_FORMAT},
            "pathSeparator": "|",
        },
    }
