"""Synthetic E2E-style MR/reference pairs for smoke tests and desk-scale runs.

References are produced from a small phrase grammar so every open-class value
appears verbatim and closed-class slots use the default realization phrases.
"""
import csv

import numpy as np

NAMES = ["Wildwood", "The Cricketers", "The Plough", "Blue Spice", "The Eagle", "Zizzi",
         "Aromi", "The Phoenix", "Cotto", "Fitzbillies", "The Vaults", "Alimentum",
         "Browns Cambridge", "Giraffe", "Loch Fyne", "Strada", "The Mill", "Clowns",
         "The Wrestlers", "Midsummer House", "Green Man", "The Punter", "Bibimbap House",
         "The Waterman", "Travellers Rest Beefeater", "The Olive Grove", "Taste of Cambridge",
         "The Golden Curry", "The Rice Boat", "Cocum"]
NEAR = ["Raja Indian Cuisine", "Café Rouge", "The Bakers", "Crowne Plaza Hotel", "Burger King",
        "Express by Holiday Inn", "The Portland Arms", "Avalon", "Rainbow Vegetarian Café",
        "All Bar One", "Yippee Noodle Bar", "Café Sicilia", "The Sorrento", "Ranch"]
FOOD = ["Indian", "Chinese", "English", "Italian", "French", "Japanese", "Fast food"]
EAT = ["restaurant", "pub", "coffee shop"]
AREA = ["riverside", "city centre"]
PRICE = ["cheap", "moderate", "high"]
RATING = ["low", "average", "high"]
FAMILY = ["yes", "no"]


def _realize(slots, rng):
    s = dict(slots)
    name = s["name"]
    head = s.get("eatType", "place")
    food = s.get("food")
    first = f"{name} is a {food} {head}" if food else f"{name} is a {head}"
    loc = []
    if "area" in s:
        loc.append(f"in the {s['area']}" + (" area" if rng.random() < 0.5 else ""))
    if "near" in s:
        loc.append(f"near {s['near']}")
    if loc:
        first += " " + " ".join(loc)
    sentences = [first + "."]
    extra = []
    if "priceRange" in s:
        extra.append({"cheap": "cheap", "moderate": "moderately priced",
                      "high": "expensive"}[s["priceRange"]])
    if "customer rating" in s:
        extra.append(f"has a {s['customer rating']} customer rating")
    if extra:
        if len(extra) == 2:
            sentences.append(f"It is {extra[0]} and {extra[1]}.")
        elif extra[0].startswith("has"):
            sentences.append(f"It {extra[0]}.")
        else:
            sentences.append(f"It is {extra[0]}.")
    if "familyFriendly" in s:
        if s["familyFriendly"] == "yes":
            sentences.append("It is " + ("family friendly." if rng.random() < 0.5 else "kid friendly."))
        else:
            sentences.append("It is not family friendly.")
    return " ".join(sentences)


def synth_e2e(n, seed=0, max_optional=6):
    """Return ``n`` ``(mr_string, reference)`` rows with distinct MRs."""
    rng = np.random.default_rng(seed)
    optional = [("eatType", EAT), ("food", FOOD), ("priceRange", PRICE),
                ("customer rating", RATING), ("area", AREA), ("familyFriendly", FAMILY),
                ("near", NEAR)]
    rows, seen = [], set()
    attempts = 0
    while len(rows) < n:
        attempts += 1
        if attempts > 100 * n:
            raise RuntimeError("could not draw enough distinct MRs")
        slots = [("name", NAMES[rng.integers(len(NAMES))])]
        k = int(rng.integers(2, max_optional + 1))
        chosen = sorted(rng.choice(len(optional), size=min(k, len(optional)), replace=False))
        for j in chosen:
            slot, pool = optional[j]
            slots.append((slot, pool[rng.integers(len(pool))]))
        mr = ", ".join(f"{a}[{b}]" for a, b in slots)
        if mr in seen:
            continue
        seen.add(mr)
        rows.append((mr, _realize(slots, rng)))
    return rows


def write_e2e_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mr", "ref"])
        w.writerows(rows)
