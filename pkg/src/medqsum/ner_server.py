"""Stdio NER server speaking the adapter protocol.

Interactive mode reads ``{"text": ...}`` lines from stdin and answers each with
``{"spans": [...]}``. ``--batch FILE`` answers every line of FILE and exits.

Backends: ``lexicon`` (default, bundled or ``--lexicon`` term list) and
``stanza`` (requires the stanza package; ``--models`` picks the biomedical
NER packages whose outputs are merged, longer span first on overlap).
"""

from __future__ import annotations

import argparse
import json
import sys

from medqsum.entities import EntitySpan, LexiconRecognizer, resolve_overlaps


class StanzaRecognizer:
    def __init__(self, models: list[str], package: str = "mimic"):
        import stanza  # optional dependency

        self.pipelines = [
            stanza.Pipeline("en", package=package, processors={"ner": m}, verbose=False)
            for m in models
        ]

    def recognize(self, text: str) -> list[EntitySpan]:
        spans = []
        for nlp in self.pipelines:
            for ent in nlp(text).entities:
                spans.append(EntitySpan(text[ent.start_char:ent.end_char], ent.start_char, ent.end_char, ent.type))
        return resolve_overlaps(spans)


def _answer(recognizer, line: str) -> str:
    text = json.loads(line)["text"]
    return json.dumps({"spans": [s.to_json() for s in recognizer.recognize(text)]}, ensure_ascii=False)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--backend", choices=["lexicon", "stanza"], default="lexicon")
    ap.add_argument("--lexicon", help="lexicon file (default: bundled)")
    ap.add_argument("--models", default="bc5cdr,ncbi_disease,i2b2,radiology")
    ap.add_argument("--batch", metavar="FILE")
    args = ap.parse_args(argv)

    if args.backend == "stanza":
        recognizer = StanzaRecognizer(args.models.split(","))
    elif args.lexicon:
        recognizer = LexiconRecognizer.from_file(args.lexicon)
    else:
        recognizer = LexiconRecognizer.bundled()

    if args.batch:
        with open(args.batch, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    print(_answer(recognizer, line))
        return 0
    for line in sys.stdin:
        if line.strip():
            print(_answer(recognizer, line), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
