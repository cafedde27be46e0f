"""Synthetic consumer-question / summary pairs for hermetic tests and demos.

Pairs are built from templates filled with terms of the bundled lexicon. A
share of summaries carries no medical term so focus rates are below 1.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from medqsum import rng
from medqsum.corpus import Dataset, QuestionPair, load_dataset
from medqsum.entities import bundled_lexicon_path, read_lexicon

# (faq template, [chq templates]); slots: {disease} {drug} {procedure}
_TEMPLATES: list[tuple[str, list[str]]] = [
    ("what are the side effects of {drug}?", [
        "my {who} started {drug} {when} and feels tired all day. could this be from the {drug}? what should we watch for?",
        "SUBJECT: {drug} MESSAGE: i have been on {drug} {when}. are there side effects i should know about? thanks",
    ]),
    ("is {drug} used to treat {disease}?", [
        "SUBJECT: {disease} MESSAGE: my {who} has {disease}. a friend said {drug} helps with it. is that true?",
        "hello, i was told i have {disease} {when}. is the medication {drug} useful for {disease}? thank you",
    ]),
    ("what are the treatments for {disease}?", [
        "my {who} was diagnosed with {disease} {when}. nothing seems to help. what options are there?",
        "SUBJECT: {disease} MESSAGE: i suffer from {disease} and want to know how it is treated. thanks a lot",
    ]),
    ("is it too late to get the vaccine for {disease}?", [
        "my {who} is {age} years old and never had the vaccine for {disease}. is it too late now?",
        "SUBJECT: {disease} vaccine MESSAGE: i am {age}. can i still get a vaccine against {disease} or is it too late?",
    ]),
    ("what causes {disease}?", [
        "my {who} keeps getting {disease} {when}. why does this happen? nobody in the family had it",
        "SUBJECT: {disease} MESSAGE: i am {age} and just learned i have {disease}. what is the cause of it?",
    ]),
    ("can {drug} cause {disease}?", [
        "my {who} takes {drug} and {when} developed {disease}. could the {drug} be the reason?",
        "SUBJECT: {drug} MESSAGE: i am {age}, on {drug}, and now i have {disease}. is there a link?",
    ]),
    ("how is {disease} diagnosed?", [
        "my {who} might have {disease}. what tests do doctors use to find out? we are worried",
        "SUBJECT: {disease} MESSAGE: i think i have {disease} {when}. how can a doctor confirm it?",
    ]),
    ("what is the right dose of {drug}?", [
        "my {who} is {age} and was given {drug}. how much should be taken each day?",
        "SUBJECT: {drug} dose MESSAGE: how much {drug} is safe for someone who is {age}? please help",
    ]),
    ("what types of dressings are used for {procedure} sites?", [
        "my {who} had a {procedure} {when}. the site is still sore. which dressings should be used?",
        "SUBJECT: dressings MESSAGE: after my {procedure} the nurse changes the dressings often. what kind is best?",
    ]),
    ("how long is recovery after {procedure}?", [
        "my {who} is {age} and is scheduled for {procedure}. how long until normal life again?",
        "SUBJECT: {procedure} MESSAGE: i had {procedure} {when}. when will i be fully recovered?",
    ]),
    ("how do i find a good doctor near me?", [
        "we just moved to a new town with my {who}. how can we find a doctor we trust?",
        "SUBJECT: doctor MESSAGE: i am {age} and need a new family doctor. where do i start looking?",
    ]),
    ("how can i get a second opinion?", [
        "my {who} got news from a doctor {when} that we do not trust. can we ask another doctor?",
        "SUBJECT: opinion MESSAGE: i am {age} and unsure about what my doctor said. can i see someone else?",
    ]),
]

_WHO = ["mother", "father", "son", "daughter", "wife", "husband", "grandmother", "brother", "sister", "friend"]
_WHEN = ["last week", "two months ago", "a year ago", "recently", "this spring", "three days ago"]
_AGES = ["8", "15", "24", "33", "41", "56", "62", "70", "78"]


def _slots() -> dict[str, list[str]]:
    terms = read_lexicon(bundled_lexicon_path())
    by_cat: dict[str, list[str]] = {}
    for term, cat in terms.items():
        by_cat.setdefault(cat or "", []).append(term)
    return {
        "disease": sorted(by_cat["disease"]),
        "drug": sorted(t for t in by_cat["chemical"]),
        "procedure": sorted(by_cat["procedure"]),
    }


def make_corpus(n: int, seed: int = 7, name: str = "synthetic") -> Dataset:
    """``n`` distinct pairs, deterministic in ``seed``."""
    slots = _slots()
    gen = rng.stream(seed, "synthetic")
    pairs, seen = [], set()
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise RuntimeError(f"could not generate {n} distinct pairs")
        faq_t, chq_ts = _TEMPLATES[gen.integers(len(_TEMPLATES))]
        chq_t = chq_ts[gen.integers(len(chq_ts))]
        fill = {k: v[gen.integers(len(v))] for k, v in slots.items()}
        fill.update(
            who=_WHO[gen.integers(len(_WHO))],
            when=_WHEN[gen.integers(len(_WHEN))],
            age=_AGES[gen.integers(len(_AGES))],
        )
        chq, faq = chq_t.format(**fill), faq_t.format(**fill)
        if (chq, faq) in seen:
            continue
        seen.add((chq, faq))
        pairs.append(QuestionPair(f"{name}-{len(pairs):04d}", chq, faq))
    return Dataset(name, pairs)


def toy_corpus_path() -> Path:
    return Path(str(resources.files("medqsum") / "data" / "toy_corpus.jsonl"))


def toy_corpus() -> Dataset:
    """The bundled 100-pair corpus (``make_corpus(100, seed=7, name="toy")``)."""
    return load_dataset(toy_corpus_path(), name="toy")
