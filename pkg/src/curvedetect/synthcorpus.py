"""Deterministic synthetic text corpora for demos and tests.

Paragraphs are composed from fixed English word banks through a handful of
sentence templates. Slot vocabularies are wide enough that an order-3
model trained on one corpus memorizes its specific word combinations
without ever covering the combination space, which is exactly the regime
the detection statistic needs. Themed banks share function words but have
disjoint content words, giving cleanly separated "training corpora" for
cross-detection experiments. No external datasets are bundled or fetched.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .util import atomic_write_text

_DETERMINERS = ["the", "a", "this", "that", "each", "every"]

_PREPOSITIONS = ["near", "behind", "beside", "under", "above", "along", "past", "within"]

_ADVERBS = [
    "quietly", "slowly", "suddenly", "carefully", "eagerly", "gently", "often",
    "rarely", "finally", "early", "late", "calmly", "bravely", "gladly",
    "nearly", "barely", "plainly", "softly", "sharply", "warmly", "widely",
    "deeply", "freely", "kindly",
]

_CONNECTIVES = ["and", "but", "while", "because", "although", "before", "after", "since"]

_GENERAL = {
    "nouns": [
        "teacher", "merchant", "child", "doctor", "farmer", "painter", "soldier",
        "writer", "driver", "baker", "hunter", "singer", "dancer", "weaver",
        "mason", "porter", "clerk", "judge", "mayor", "miller", "smith",
        "tailor", "scholar", "pilgrim", "stranger", "neighbor", "widow",
        "carpenter", "shepherd", "servant", "guard", "cook", "nurse",
        "letter", "basket", "candle", "mirror", "ladder", "bottle", "bundle",
        "carpet", "curtain", "drawer", "engine", "fiddle", "garment", "hammer",
        "jacket", "kettle", "lantern", "market", "needle", "orchard", "parcel",
        "pencil", "pillow", "ribbon", "saddle", "shovel", "table", "ticket",
        "wagon", "wallet", "window", "anchor", "barrel", "blanket", "bridge",
        "button", "cabin", "cellar", "chimney", "clock", "coat", "copper",
        "cork", "cradle", "dish", "fence", "flag", "flour", "fork", "gate",
        "glove", "grain", "harness", "hinge", "hook", "iron", "jar", "kite",
        "knife", "lamp", "lock", "map", "nail", "oven",
    ],
    "verbs": [
        "carried", "opened", "repaired", "painted", "borrowed", "counted",
        "delivered", "dropped", "examined", "finished", "followed", "gathered",
        "guarded", "handed", "hid", "lifted", "measured", "mended", "moved",
        "noticed", "offered", "packed", "passed", "placed", "polished",
        "prepared", "pulled", "pushed", "reached", "received", "remembered",
        "returned", "rolled", "sealed", "shared", "showed", "sold", "sorted",
        "stacked", "studied", "swept", "tied", "touched", "traded", "trimmed",
        "turned", "unpacked", "washed", "watched", "weighed", "wrapped",
        "admired", "arranged", "avoided", "balanced", "brushed", "buried",
        "chased", "cleaned", "covered", "crossed", "described", "dragged",
        "fetched",
    ],
    "adjectives": [
        "old", "small", "heavy", "quiet", "bright", "narrow", "wooden",
        "broken", "clean", "cold", "crooked", "curious", "dusty", "empty",
        "faded", "fine", "flat", "fresh", "gentle", "golden", "grey", "hollow",
        "honest", "large", "little", "long", "loud", "low", "modest", "new",
        "pale", "patient", "plain", "polished", "proud", "quick", "round",
        "rough", "rusty", "sharp", "shiny", "silent", "simple", "smooth",
        "soft", "solid", "spare", "steady", "stout", "strange", "sturdy",
        "tall", "thin", "tidy", "tired", "warm", "weathered", "wide", "worn",
        "young", "ancient", "careful", "cheerful", "clever",
    ],
    "places": [
        "village", "courtyard", "workshop", "kitchen", "library", "station",
        "square", "alley", "attic", "barn", "chapel", "cottage", "crossing",
        "garden", "granary", "inn", "lane", "meadow", "mill", "stable",
    ],
}

_THEMES = {
    "harbor": {
        "nouns": [
            "sailor", "captain", "fisherman", "mate", "pilot", "docker",
            "lighthouse", "anchor", "mast", "sail", "rudder", "hull", "deck",
            "rope", "net", "buoy", "compass", "chart", "tide", "wave", "gull",
            "cargo", "crate", "harbor", "pier", "quay", "skiff", "schooner",
            "ferry", "trawler", "galley", "keel", "rigging", "spray", "storm",
            "current", "channel", "beacon", "fleet", "voyage",
        ],
        "verbs": [
            "moored", "sailed", "anchored", "hoisted", "lowered", "steered",
            "docked", "rowed", "drifted", "launched", "hauled", "charted",
            "signaled", "navigated", "ferried", "loaded", "unloaded", "rigged",
            "patched", "salvaged", "tacked", "beached", "weathered", "sounded",
        ],
        "adjectives": [
            "salty", "windward", "seaworthy", "briny", "foggy", "tidal",
            "stormy", "becalmed", "weatherbeaten", "barnacled", "leaky",
            "trim", "swift", "laden", "distant", "northern",
        ],
        "places": [
            "wharf", "dockyard", "boathouse", "breakwater", "cove", "estuary",
            "lagoon", "marina", "shipyard", "strait",
        ],
    },
    "orchard": {
        "nouns": [
            "gardener", "beekeeper", "picker", "grafter", "pruner",
            "apple", "pear", "plum", "cherry", "blossom", "branch", "root",
            "trunk", "leaf", "seed", "sapling", "hive", "bee", "nectar",
            "pollen", "ladderback", "bushel", "cider", "press", "graft",
            "hedge", "trellis", "vine", "berry", "stem", "petal", "bough",
            "thicket", "bark", "sap", "harvest", "furrow", "mulch", "compost",
            "scion",
        ],
        "verbs": [
            "pruned", "grafted", "picked", "planted", "watered", "harvested",
            "ripened", "blossomed", "pollinated", "thinned", "mulched",
            "pressed", "sprayed", "staked", "weeded", "budded", "espaliered",
            "transplanted", "germinated", "flowered", "bore", "dried",
            "preserved", "fermented",
        ],
        "adjectives": [
            "ripe", "sweet", "tart", "juicy", "blossoming", "grafted",
            "sunlit", "shaded", "fragrant", "fruitful", "hardy", "tender",
            "seasonal", "heirloom", "windfallen", "overgrown",
        ],
        "places": [
            "grove", "nursery", "arbor", "greenhouse", "hollow", "terrace",
            "hillside", "paddock", "clearing", "glade",
        ],
    },
}


def _bank(theme: str | None) -> dict[str, list[str]]:
    if theme is None:
        return _GENERAL
    if theme not in _THEMES:
        raise KeyError(f"unknown theme {theme!r}; choose from {sorted(_THEMES)}")
    return _THEMES[theme]


# Sentence skeletons; slot names index the word banks.
_TEMPLATES = [
    ("D", "A", "N", "V", "D", "N", "P", "D", "L"),
    ("D", "N", "R", "V", "D", "A", "N"),
    ("P", "D", "L", ",", "D", "N", "V", "D", "A", "N"),
    ("D", "N", "C", "D", "N", "V", "P", "D", "L"),
    ("D", "A", "N", "V", "D", "N", ",", "C", "D", "N", "V", "R"),
    ("D", "N", "V", "D", "A", "N", "P", "D", "N"),
    ("R", ",", "D", "N", "V", "D", "N", "P", "D", "A", "L"),
    ("D", "A", "A", "N", "V", "P", "D", "L"),
]


def _sentence(rng: np.random.Generator, bank: dict[str, list[str]]) -> str:
    slots = {
        "D": _DETERMINERS,
        "A": bank["adjectives"],
        "N": bank["nouns"],
        "V": bank["verbs"],
        "P": _PREPOSITIONS,
        "L": bank["places"],
        "R": _ADVERBS,
        "C": _CONNECTIVES,
    }
    template = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    words = []
    for slot in template:
        if slot == ",":
            if words:
                words[-1] = words[-1] + ","
            continue
        pool = slots[slot]
        words.append(pool[int(rng.integers(len(pool)))])
    text = " ".join(words)
    return text[0].upper() + text[1:] + "."


def generate_paragraph(
    rng: np.random.Generator,
    theme: str | None = None,
    min_sentences: int = 3,
    max_sentences: int = 8,
) -> str:
    bank = _bank(theme)
    n = int(rng.integers(min_sentences, max_sentences + 1))
    return " ".join(_sentence(rng, bank) for _ in range(n))


def generate_corpus(
    n_paragraphs: int,
    seed: int = 0,
    theme: str | None = None,
    min_sentences: int = 3,
    max_sentences: int = 8,
) -> list[str]:
    """n_paragraphs deterministic paragraphs for the given seed and theme."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return [
        generate_paragraph(rng, theme, min_sentences, max_sentences)
        for _ in range(n_paragraphs)
    ]


def write_corpus_jsonl(texts: list[str], path: str | Path) -> None:
    atomic_write_text(
        path, "\n".join(json.dumps({"text": t}) for t in texts) + "\n"
    )
