"""Assemble a char-level Shakespeare corpus from public-domain Gutenberg plays.

Usage: python3 make_corpus.py <dir with *_gut.txt files> <out.txt>

Speaker headers like "FIRST CITIZEN." become "First Citizen:", stage
directions in brackets are dropped, and the text is restricted to a
65-character alphabet (newline, space, punctuation, digit 3, letters).
"""
import re
import sys
from pathlib import Path

PLAYS = [
    "coriolanus_gut.txt",
    "richard_ii_gut.txt",
    "richard_iii_gut.txt",
    "romeo_and_juliet_gut.txt",
    "winters_tale_gut.txt",
    "henry_vi_part_3_gut.txt",
    "measure_for_measure_gut.txt",
    "taming_of_the_shrew_gut.txt",
    "henry_vi_part_2_gut.txt",
]
ALPHABET = set("\n !$&',-.3:;?ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz")
SPEAKER = re.compile(r"^([A-Z][A-Z' ]+[A-Z])\.\s*$")


def convert(text: str) -> str:
    # skip the dramatis personae: start at the first speaker header
    lines = text.splitlines()
    out = []
    started = False
    for line in lines:
        line = line.rstrip()
        m = SPEAKER.match(line)
        if m and not line.startswith(("ACT", "SCENE", "PERSONS", "DRAMATIS")):
            started = True
            if out and out[-1] != "":
                out.append("")
            out.append(m.group(1).title() + ":")
            continue
        if not started:
            continue
        if line.startswith(("ACT ", "SCENE ", "THE END")):
            continue
        line = re.sub(r"\[.*?\]", "", line).strip()
        if line.startswith("[") or line.endswith("]"):
            continue
        if not line:
            if out and out[-1] != "" and not out[-1].endswith(":"):
                out.append("")
            continue
        out.append(line)
    body = "\n".join(out)
    body = body.replace("’", "'").replace("‘", "'").replace("--", "-")
    return "".join(c for c in body if c in ALPHABET)


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    parts = [convert((src / p).read_text(encoding="latin-1")) for p in PLAYS]
    text = "\n\n".join(parts).strip() + "\n"
    text = re.sub(r"\n{3,}", "\n\n", text)
    dst.write_text(text, encoding="utf-8")
    print(f"{len(text)} chars, vocab {len(set(text))}")


if __name__ == "__main__":
    main()
