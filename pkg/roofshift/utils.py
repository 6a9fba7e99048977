import json
import os
from concurrent.futures import ThreadPoolExecutor

from . import debug


def id_key(value):
    """
    Sort key for identifiers that may be ints or strings. Numbers sort
    before strings and numerically among themselves.
    """
    if isinstance(value, bool):
        return (1, str(value))
    if isinstance(value, (int, float)):
        return (0, value)
    return (1, str(value))


def write_json(obj, path, indent=1):
    """
    Write JSON deterministically. Floats use repr (shortest round-trip) so
    the file is byte-identical for identical inputs.
    """
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, "wt", encoding="utf-8") as file:
        json.dump(obj, file, indent=indent, allow_nan=False)
        file.write("\n")
    debug(f"Wrote '{path}'")


def ordered_map(func, items, jobs=1):
    """
    map() with an optional bounded thread pool. Results always come back in
    input order so any reduction over them is deterministic.
    """
    items = list(items)
    jobs = int(max(jobs or 1, 1))
    if jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=jobs) as exe:
        return list(exe.map(func, items))


def time_format(dt, upper=False):
    """Format time into days (D), hours (H), minutes (M), and seconds (S)"""
    labels = [  # Label, # of sec
        ("D", 60 * 60 * 24),
        ("H", 60 * 60),
        ("M", 60),
        ("S", 1),
    ]
    res = []
    for label, sec in labels:
        val, dt = divmod(dt, sec)
        if not val and not res and label != "S":  # Do not skip if already done
            continue
        if label == "S" and dt > 0:  # Need to handle leftover
            res.append(f"{val+dt:0.2f}")
        elif label in "HMS":  # these get zero padded
            res.append(f"{int(val):02d}")
        else:  # Do not zero pad days
            res.append(f"{int(val):d}")
        res.append(label if upper else label.lower())
    return "".join(res)


def format_table(header, rows):
    """Plain left-aligned text table as a list of lines"""
    rows = [[str(c) for c in row] for row in rows]
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    lines.extend(fmt.format(*row) for row in rows)
    return lines
