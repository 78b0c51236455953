"""Regenerates the restaurant booking fixtures under data/fixtures.

Usage: python3 scripts/make_fixtures.py [out_dir]

Numbers are shared between `people` and `time` ("for 4" vs "at 4"), so
the tag of a number depends on its neighbours. Output is canonical JSONL
with character spans.
"""

import json
import random
import sys
from pathlib import Path

FIRST = ["anna", "ben", "carla", "david", "elena", "farid", "grace", "hugo", "ines", "jonas",
         "kate", "liam", "maya", "nils", "olga", "pavel", "rosa", "sam", "tara", "victor"]
LAST = ["smith", "garcia", "novak", "kowalski", "brown", "rossi", "ivanova", "meyer", "lopez", "chen",
        "dubois", "jensen", "silva", "khan", "walsh", "becker", "moreau", "costa", "nagy", "lindqvist"]
DATES = ["tomorrow", "today", "friday", "saturday", "next monday", "this sunday", "june 5th", "the 12th",
         "next week", "thursday"]
TIMES = ["7pm", "8 pm", "7:30", "noon", "6", "4", "half past 8", "9 o'clock", "five", "eight thirty"]
PEOPLE = ["2", "4", "6", "two", "three", "five", "4 people", "six people", "a party of 8", "ten"]

TEMPLATES = [
    "book a table for {people} at {time}",
    "table for {people} {date} at {time}",
    "can i get a table for {people} on {date}",
    "we are {people} and would like to come at {time}",
    "reserve for {people} at {time} under {first} {last}",
    "my name is {first} {last}",
    "the booking is under {last}",
    "it is for {first}",
    "{date} at {time} please",
    "i would like to book for {date}",
    "at {time} for {people}",
    "for {people} at {time} {date}",
    "could you fit {people} in at {time}",
    "name {first} {last} , {people} guests",
    "please change it to {time} on {date}",
    "put it under {first} {last} for {date}",
    "is {time} {date} available",
    "hi , {first} here , table for {people}",
    "any chance of a table {date}",
    "just the surname {last} please",
]


def render(template, rng):
    text, spans = "", []
    for i, word in enumerate(template.split()):
        if i:
            text += " "
        if word.startswith("{") and word.endswith("}"):
            slot = word[1:-1]
            value = rng.choice({"people": PEOPLE, "time": TIMES, "date": DATES,
                                "first": FIRST, "last": LAST}[slot])
            name = {"first": "first_name", "last": "last_name"}.get(slot, slot)
            spans.append({"start_char": len(text), "end_char": len(text) + len(value), "slot": name})
            text += value
        else:
            text += word
    return {"text": text, "spans": spans, "lang": "en"}


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/fixtures")
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(8198)
    for name, count in [("restaurants_train", 200), ("restaurants_dev", 50), ("restaurants_test", 100)]:
        rows = [render(TEMPLATES[i % len(TEMPLATES)], rng) for i in range(count)]
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
