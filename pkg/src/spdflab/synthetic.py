"""Bundled synthetic corpora standing in for the real datasets at desk scale.

Two downstream tasks plus a pretraining corpus, all from small closed
grammars so runs finish on a laptop CPU:

* data-to-text: restaurant records (name, food, price, ...) realized into
  descriptions. Each name deterministically selects one of three surface
  templates, so producing the right wording requires associating entities
  with phrasings -- a capacity-sensitive skill, not pure copying.
* summarization: multi-sentence "articles" about a company, with distractor
  sentences about other entities; the summary restates the three core facts.
  Harder than data-to-text: the model must find and compress the right facts
  over a long context.
* pretraining corpus: prose from the same grammars (descriptions and
  articles, never the prompt format), so pre-training teaches the domain and
  fine-tuning teaches the task.
"""

from __future__ import annotations

import numpy as np

NAME_FIRST = [
    "Blue", "Golden", "Silver", "Green", "Crimson", "Royal", "Happy", "Quiet",
    "Rustic", "Sunny", "Velvet", "Copper", "Ivory", "Amber", "Coral", "Misty",
    "Noble", "Lucky", "Grand", "Gentle",
]
NAME_SECOND = [
    "Spice", "Garden", "Palace", "Table", "Kitchen", "Lantern", "Harbor",
    "Orchard", "Corner", "Plate", "Grove", "Anchor", "Mill", "Hearth", "Terrace",
]
FOODS = [
    "French", "Italian", "Indian", "Japanese", "Chinese", "Mexican", "Thai",
    "Greek", "Spanish", "Turkish", "Korean", "English",
]
PRICES = ["cheap", "moderate", "expensive"]
RATINGS = ["low", "average", "excellent"]
AREAS = ["city centre", "riverside", "old town"]
NEAR = [
    "the station", "the market", "the museum", "the bridge", "the park",
    "the cinema", "the harbour", "the library", "the square", "the cathedral",
]

PRICE_PHRASE = {"cheap": "cheap", "moderate": "moderately priced", "expensive": "expensive"}


def _variant(name: str) -> int:
    # deterministic per entity; ties wording to the entity identity
    return (len(name) + sum(name.encode("utf-8"))) % 3


def realize_restaurant(fields: dict) -> str:
    """Deterministic reference text for a restaurant record."""
    name = fields["name"]
    var = _variant(name)
    food = fields.get("food")
    price = PRICE_PHRASE.get(fields.get("price", ""), None)
    area = fields.get("area")
    parts = []
    if var == 0:
        s = f"{name} is a {price} {food} restaurant" if price else f"{name} is a {food} restaurant"
        if area:
            s += f" in the {area}"
        parts.append(s + ".")
    elif var == 1:
        s = f"{name} serves {food} food"
        if price:
            s += f" at {fields['price']} prices"
        if area:
            s += f" in the {area}"
        parts.append(s + ".")
    else:
        s = f"In the {area}, " if area else ""
        s += f"{name} offers {food} cuisine"
        if price:
            s += f" and {price} dishes"
        parts.append(s + ".")
    if "rating" in fields:
        r = fields["rating"]
        article = "an" if r[0] in "ae" else "a"
        parts.append(
            f"It has {article} {r} customer rating."
            if var != 1
            else f"Customers give it {article} {r} rating."
        )
    if "family_friendly" in fields:
        yes = fields["family_friendly"] == "yes"
        parts.append("It welcomes families." if yes else "It is not family friendly.")
    if "near" in fields:
        parts.append(f"You can find it near {fields['near']}.")
    return " ".join(parts)


def sample_restaurant_record(rng: np.random.Generator) -> dict:
    fields = {
        "name": f"{rng.choice(NAME_FIRST)} {rng.choice(NAME_SECOND)}",
        "food": str(rng.choice(FOODS)),
    }
    if rng.random() < 0.7:
        fields["price"] = str(rng.choice(PRICES))
    if rng.random() < 0.6:
        fields["rating"] = str(rng.choice(RATINGS))
    if rng.random() < 0.6:
        fields["area"] = str(rng.choice(AREAS))
    if rng.random() < 0.35:
        fields["family_friendly"] = str(rng.choice(["yes", "no"]))
    if rng.random() < 0.35:
        fields["near"] = str(rng.choice(NEAR))
    return fields


def generate_data2text_records(n: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        fields = sample_restaurant_record(rng)
        records.append({"fields": fields, "reference": realize_restaurant(fields)})
    return records


# ------------------------------------------------------------ summarization

COMPANY_FIRST = [
    "Acme", "Nova", "Orbit", "Vertex", "Zenith", "Borealis", "Cascade", "Delta",
    "Ember", "Fathom", "Gyro", "Halo", "Iris", "Juniper", "Krypton", "Lumen",
]
COMPANY_SECOND = [
    "Systems", "Labs", "Industries", "Group", "Works", "Dynamics", "Partners",
    "Logistics", "Networks", "Holdings",
]
SECTORS = [
    "software", "shipping", "energy", "textile", "farming", "robotics",
    "publishing", "mining", "tourism", "banking",
]
CITIES = [
    "Lisbon", "Oslo", "Kyoto", "Toronto", "Porto", "Geneva", "Dublin",
    "Valencia", "Hamburg", "Adelaide",
]
FILLERS = [
    "The quarterly report also mentions routine maintenance at several sites.",
    "Analysts spent the week comparing notes on unrelated markets.",
    "A spokesperson declined to comment on rumours about {other}.",
    "Meanwhile, {other} announced a partnership in the {sector} sector.",
    "Local newspapers covered the story with little enthusiasm.",
    "Industry observers called the season unremarkable overall.",
    "A minor dispute with {other} was settled out of court.",
    "The company newsletter highlighted an office move and new hires.",
]


ARTICLE_CLOSERS = [
    "In short, {entity} has been a {sector} name in {city} since {year}.",
    "After {year}, few {sector} firms from {city} moved like {entity}.",
    "That {pct} percent revenue change keeps {entity} in the {sector} news.",
]


def _company_record(rng: np.random.Generator) -> dict:
    entity = f"{rng.choice(COMPANY_FIRST)} {rng.choice(COMPANY_SECOND)}"
    sector = str(rng.choice(SECTORS))
    city = str(rng.choice(CITIES))
    year = int(rng.integers(1950, 2021))
    moved = "grew" if rng.random() < 0.5 else "fell"
    pct = int(rng.integers(2, 40))
    facts = [
        f"{entity} is a {sector} company.",
        f"{entity} was founded in {year} in {city}.",
        f"This year {entity} revenue {moved} by {pct} percent.",
    ]
    fillers = []
    for _ in range(int(rng.integers(3, 6))):
        other = f"{rng.choice(COMPANY_FIRST)} {rng.choice(COMPANY_SECOND)}"
        tmpl = str(rng.choice(FILLERS))
        fillers.append(tmpl.format(other=other, sector=str(rng.choice(SECTORS))))
    sentences = [facts[0]]
    rest = facts[1:] + fillers
    order = rng.permutation(len(rest))
    sentences += [rest[i] for i in order]
    # fact-dense summary: most tokens must be retrieved from the article
    summary = (
        f"{entity} is a {sector} firm from {city}, founded {year}; "
        f"revenue {moved} {pct} percent."
    )
    return {
        "entity": entity, "sector": sector, "city": city, "year": year,
        "moved": moved, "pct": pct,
        "document": " ".join(sentences), "summary": summary,
    }


def generate_summarization_records(n: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        rec = _company_record(rng)
        records.append({"document": rec["document"], "summary": rec["summary"]})
    return records


# -------------------------------------------------------- pretraining corpus

REVISIT_LINES = [
    "Many guests return to {name} for the {food} dishes.",
    "Regulars say {name} rarely disappoints.",
    "A visit to {name} is easy to recommend.",
    "{name} stays busy most evenings.",
]


def generate_pretrain_corpus(n_docs: int, seed: int) -> list[str]:
    """Mixed pretraining documents: linearized record/description pairs,
    restaurant prose paragraphs, company articles whose closing line restates
    the core facts, and article/summary pairs. Entities and facts recur
    within documents, so the corpus rewards in-context copying and long-range
    retrieval -- the skills the downstream tasks lean on."""
    from .data import linearize_fields

    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        r = rng.random()
        if r < 0.25:
            fields = sample_restaurant_record(rng)
            docs.append(f"{linearize_fields(fields)} {realize_restaurant(fields)}")
        elif r < 0.5:
            parts = []
            for _ in range(int(rng.integers(1, 4))):
                fields = sample_restaurant_record(rng)
                parts.append(realize_restaurant(fields))
                if rng.random() < 0.8:
                    line = str(rng.choice(REVISIT_LINES))
                    parts.append(line.format(name=fields["name"], food=fields["food"]))
            docs.append(" ".join(parts))
        elif r < 0.8:
            rec = _company_record(rng)
            doc = rec["document"]
            if rng.random() < 0.75:
                closer = str(rng.choice(ARTICLE_CLOSERS))
                doc += " " + closer.format(**rec)
            docs.append(doc)
        else:
            rec = _company_record(rng)
            docs.append(f"{rec['document']} || {rec['summary']}")
    return docs


def split_records(records: list, fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Deterministic train/val/test split in given proportions."""
    n = len(records)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return (
        records[:n_train],
        records[n_train : n_train + n_val],
        records[n_train + n_val :],
    )
