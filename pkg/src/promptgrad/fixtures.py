"""Generator for the bundled datasets, corpus and backend scripts.

The files under ``promptgrad/data`` are produced by :func:`build_all`; a test
keeps them in sync. Run ``python -m promptgrad.fixtures DIR`` to regenerate.

Scripts are built around stable anchors (question text, fixed output-format
prompts, retrieved document titles) so they keep matching while trainable
prompts change.
"""

from __future__ import annotations

import json
import random
import sys
from pathlib import Path
from typing import Any

from .backends import ScriptEntry
from .components import Document, DocumentCorpus
from .pipelines import ANSWER_FORMAT, QUERY_FORMAT, TOOLS_SPEC, OBJECT_COUNT_PROMPT, TREC_PROMPT

# -- object counting ------------------------------------------------------------

OC_FIX_ANCHOR = "Count every individual item, multiplying by any stated quantity."
OC_FLAWED = (
    "You will answer a reasoning question. List each distinct kind of object once, then think step by step. "
    "The last line of your response should be of the following format: 'Answer: $VALUE' where VALUE is a "
    "numerical value."
)
OC_FIXED = OBJECT_COUNT_PROMPT + " " + OC_FIX_ANCHOR
OC_GENERIC = (
    "You will answer a reasoning question. Think carefully and step by step. The last line of your response "
    "should be of the following format: 'Answer: $VALUE' where VALUE is a numerical value."
)

_CATEGORIES = {
    "fruits": [("apple", "apples"), ("banana", "bananas"), ("plum", "plums"), ("orange", "oranges"),
               ("peach", "peaches"), ("nectarine", "nectarines"), ("strawberry", "strawberries"),
               ("grape", "grapes")],
    "vegetables": [("carrot", "carrots"), ("onion", "onions"), ("cabbage", "cabbages"), ("potato", "potatoes"),
                   ("yam", "yams"), ("lettuce head", "lettuce heads"), ("garlic clove", "garlic cloves")],
    "musical instruments": [("piano", "pianos"), ("flute", "flutes"), ("trombone", "trombones"),
                            ("violin", "violins"), ("drum", "drums"), ("clarinet", "clarinets"),
                            ("accordion", "accordions")],
    "animals": [("cat", "cats"), ("goat", "goats"), ("rabbit", "rabbits"), ("snail", "snails"), ("cow", "cows"),
                ("pig", "pigs"), ("duck", "ducks"), ("chicken", "chickens")],
}
_NUMBER_WORDS = {2: "two", 3: "three", 4: "four"}


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def object_count_samples(seed: int = 2024) -> list[dict[str, Any]]:
    """12 questions; the even-numbered ones contain multiples."""
    rng = random.Random(seed)
    cats = list(_CATEGORIES)
    out = []
    for i in range(12):
        cat = cats[i % len(cats)]
        items = rng.sample(_CATEGORIES[cat], rng.randint(3, 5))
        counts = [1] * len(items)
        multiples = i % 2 == 0
        if multiples:
            for j in rng.sample(range(len(items)), rng.randint(1, 2)):
                counts[j] = rng.randint(2, 4)
        phrases = [
            f"{_article(s)} {s}" if c == 1 else f"{_NUMBER_WORDS[c]} {pl}" for (s, pl), c in zip(items, counts)
        ]
        listing = ", ".join(phrases[:-1]) + f", and {phrases[-1]}"
        out.append({
            "id": f"oc-{i + 1:02d}",
            "question": f"I have {listing}. How many {cat} do I have?",
            "answer": str(sum(counts)),
            "distinct": len(items),
            "multiples": multiples,
            "breakdown": [(s if c == 1 else pl, c) for (s, pl), c in zip(items, counts)],
        })
    return out


def _count_response(breakdown, answer: int, cat_total: bool) -> str:
    if cat_total:
        lines = [f"- {name}: {c}" for name, c in breakdown]
        sums = " + ".join(str(c) for _, c in breakdown)
    else:
        lines = [f"- {name}" for name, _ in breakdown]
        sums = " + ".join("1" for _ in breakdown)
    return "Let me list the items.\n" + "\n".join(lines) + f"\nTotal: {sums} = {answer}\nAnswer: {answer}"


def _proposal(reasoning: str, value: str) -> str:
    return "```\n" + json.dumps({"reasoning": reasoning, "proposed_variable": value}, indent=2) + "\n```"


def object_count_script(samples: list[dict[str, Any]]) -> list[ScriptEntry]:
    entries = []
    for s in samples:
        if s["multiples"]:
            entries.append(ScriptEntry("forward", [OC_FIX_ANCHOR, s["question"]],
                                       _count_response(s["breakdown"], int(s["answer"]), True)))
            entries.append(ScriptEntry("forward", [s["question"]],
                                       _count_response(s["breakdown"], s["distinct"], False)))
        else:
            entries.append(ScriptEntry("forward", [s["question"]],
                                       _count_response(s["breakdown"], int(s["answer"]), True)))
    entries += [
        ScriptEntry("backward", ["<OUTPUTS/SCORE>"],
                    "The response counted each kind of object once and ignored the stated quantities, "
                    "so the total is lower than the ground truth."),
        ScriptEntry("backward", [],
                    "The instruction does not tell the model to multiply by stated quantities; it should "
                    "require counting every individual item."),
        ScriptEntry("optimizer", ["<NAME> task_instruction </NAME>"],
                    _proposal("Ask for a list of object kinds before reasoning.", OC_FLAWED), max_uses=1),
        ScriptEntry("optimizer", ["<NAME> task_instruction </NAME>"],
                    _proposal("The feedback says quantities were ignored; require counting each item "
                              "with its quantity.", OC_FIXED), max_uses=1),
        ScriptEntry("optimizer", [], _proposal("Rephrase the instruction.", OC_GENERIC)),
    ]
    return entries


# -- TREC ---------------------------------------------------------------------

TREC_FIX_ANCHOR = "Questions asking what an acronym stands for are ABBR; questions asking for a country are LOC."
TREC_SAMPLES = [
    ("What does NASA stand for?", "ABBR", "DESC"),
    ("What is the abbreviation for the United Nations?", "ABBR", None),
    ("Who wrote Hamlet?", "HUM", None),
    ("Who was the first person to walk on the moon?", "HUM", None),
    ("Where is the Eiffel Tower?", "LOC", None),
    ("What country has the largest population?", "LOC", "ENTY"),
    ("How many days are in a leap year?", "NUM", None),
    ("When did World War II end?", "NUM", None),
    ("What is photosynthesis?", "DESC", None),
    ("Why is the sky blue?", "DESC", None),
    ("What instrument did Jimi Hendrix play?", "ENTY", None),
    ("What kind of animal is a dingo?", "ENTY", None),
]


def trec_samples() -> list[dict[str, Any]]:
    return [{"id": f"trec-{i + 1:02d}", "question": q, "answer": a} for i, (q, a, _) in enumerate(TREC_SAMPLES)]


def trec_script() -> list[ScriptEntry]:
    entries = []
    for q, gold, wrong in TREC_SAMPLES:
        if wrong:
            entries.append(ScriptEntry("forward", [TREC_FIX_ANCHOR, q], f"The question expects {gold}.\nAnswer: {gold}"))
            entries.append(ScriptEntry("forward", [q], f"The question expects {wrong}.\nAnswer: {wrong}"))
        else:
            entries.append(ScriptEntry("forward", [q], f"The question expects {gold}.\nAnswer: {gold}"))
    entries += [
        ScriptEntry("backward", ["<OUTPUTS/SCORE>"], "The predicted class does not match the expected answer type."),
        ScriptEntry("backward", [], "The instruction should spell out how acronym and country questions are classed."),
        ScriptEntry("optimizer", ["<NAME> task_instruction </NAME>"],
                    _proposal("State the class rules that the feedback found missing.",
                              TREC_PROMPT + " " + TREC_FIX_ANCHOR), max_uses=1),
        ScriptEntry("optimizer", [], _proposal("Rephrase the instruction.", TREC_PROMPT)),
    ]
    return entries


# -- two-hop QA ---------------------------------------------------------------

CORPUS = [
    ("d00", "Erskine Childers", "Robert Erskine Childers was an English-born Irish nationalist, soldier and author."),
    ("d01", "Henry Roth", "Henry Roth was an American novelist who grew up in New York City on the Lower East Side and in Harlem."),
    ("d02", "Kiss and Tell (1945 film)", "Kiss and Tell is a 1945 comedy film in which Shirley Temple plays the teenager Corliss Archer."),
    ("d03", "Shirley Temple", "Shirley Temple Black, actress and diplomat, later served as Chief of Protocol of the United States."),
    ("d04", "The Riddle of the Sands", "The Riddle of the Sands is a 1903 spy novel written by Erskine Childers."),
    ("d05", "Call It Sleep", "Call It Sleep is a 1934 novel written by Henry Roth about an immigrant childhood."),
    ("d06", "Marlow Quartet", "The Marlow Quartet is a folk band fronted by the lead singer Ines Varga."),
    ("d07", "Ines Varga", "Ines Varga is a singer who was born in the coastal town of Lundgate."),
    ("d08", "Lundgate", "Lundgate is a coastal town known for its lighthouse, built in 1861."),
    ("d09", "Brightwater Dam", "The Brightwater Dam was designed by the civil engineer Tomas Okafor."),
    ("d10", "Tomas Okafor", "Tomas Okafor is a civil engineer who studied at the Royal Polytechnic of Aldmere."),
    ("d11", "Royal Polytechnic of Aldmere", "The Royal Polytechnic of Aldmere has a gray heron as its mascot."),
    ("d12", "The Glass Orchard", "The Glass Orchard is a novel written by Petra Lindqvist."),
    ("d13", "Petra Lindqvist", "Petra Lindqvist is a marine biologist and occasional novelist."),
    ("d14", "Harbor Lions", "The Harbor Lions are a football club whose home stadium is Kestrel Park."),
    ("d15", "Kestrel Park", "Kestrel Park is a stadium with a seating capacity of 41000."),
    ("d16", "Operation Nightjar", "Operation Nightjar was a rescue mission commanded by Ada Fenwick."),
    ("d17", "Ada Fenwick", "Ada Fenwick, a former naval officer, was later elected mayor of Port Alsen."),
    ("d18", "Sunfield Records", "Sunfield Records is a jazz label founded by Miles Dorrance."),
    ("d19", "Miles Dorrance", "Miles Dorrance was a jazz musician who played the trumpet."),
]

# question, answer, (hop-1 query, hop-1 doc), (hop-2 query, hop-2 doc), generator answer
QA = [
    ("What is the full name of the author of The Riddle of the Sands?", "Robert Erskine Childers",
     ("The Riddle of the Sands novel", "d04"), ("Erskine Childers", "d00"), "Robert Erskine Childers"),
    ("What government position was held by the woman who portrayed Corliss Archer in the film Kiss and Tell?",
     "Chief of Protocol", ("Corliss Archer Kiss and Tell film", "d02"), ("Shirley Temple position", "d03"),
     "actress"),
    ("What nationality is the author of the novel Call It Sleep?", "American",
     ("Call It Sleep novel", "d05"), ("Henry Roth nationality", "d01"), "American"),
    ("In which town was the lead singer of the Marlow Quartet born?", "Lundgate",
     ("Marlow Quartet lead singer", "d06"), ("Ines Varga born", "d07"), "Lundgate"),
    ("At which university did the engineer who designed the Brightwater Dam study?", "Royal Polytechnic of Aldmere",
     ("Brightwater Dam engineer", "d09"), ("Tomas Okafor studied", "d10"), "University of Aldmere"),
    ("What is the profession of the author of The Glass Orchard?", "marine biologist",
     ("The Glass Orchard author", "d12"), ("Petra Lindqvist profession", "d13"), "marine biologist"),
    ("What is the seating capacity of the home stadium of the Harbor Lions?", "41000",
     ("Harbor Lions home stadium", "d14"), ("Kestrel Park seating capacity", "d15"), "38000"),
    ("Of which city was the commander of Operation Nightjar later mayor?", "Port Alsen",
     ("Operation Nightjar commander", "d16"), ("Ada Fenwick mayor", "d17"), "Port Alsen"),
    ("What instrument did the founder of Sunfield Records play?", "trumpet",
     ("Sunfield Records founder", "d18"), ("Miles Dorrance instrument", "d19"), "trumpet"),
    ("What is the birthplace of Ines Varga known for?", "lighthouse",
     ("Ines Varga birthplace", "d07"), ("Lundgate known for", "d08"), "lighthouse"),
    ("What is the mascot of the university attended by Tomas Okafor?", "gray heron",
     ("Tomas Okafor university", "d10"), ("Royal Polytechnic of Aldmere mascot", "d11"), "lion"),
    ("In which city did the author of Call It Sleep grow up?", "New York City",
     ("Call It Sleep author", "d05"), ("Henry Roth grew up", "d01"), "New York City"),
]

RAG_TOP_K = 2
PLANNER_ANCHOR = "keys thought, name, args, kwargs"
QUERY_ANCHOR = "Reply with only the search query."
ANSWER_ANCHOR = "give the final answer on the last line"
assert QUERY_ANCHOR in QUERY_FORMAT and ANSWER_ANCHOR in ANSWER_FORMAT and PLANNER_ANCHOR in TOOLS_SPEC


def corpus_records() -> list[dict[str, str]]:
    return [{"id": i, "title": t, "text": x} for i, t, x in CORPUS]


def qa_samples() -> list[dict[str, str]]:
    return [{"id": f"hp-{i + 1:02d}", "question": q, "answer": a} for i, (q, a, *_rest) in enumerate(QA)]


def _title(doc_id: str) -> str:
    return next(t for i, t, _ in CORPUS if i == doc_id)


def check_retrieval(corpus: DocumentCorpus | None = None, top_k: int = RAG_TOP_K) -> None:
    """Every scripted query must surface its target document within ``top_k``."""
    corpus = corpus or DocumentCorpus(Document(i, t, x) for i, t, x in CORPUS)
    ids = [d.id for d in corpus.documents]
    for q, _a, hop1, hop2, _g in QA:
        for query, doc in (hop1, hop2):
            got = [ids[i] for _, i in corpus.rank(query)[:top_k]]
            if doc not in got:
                raise AssertionError(f"query {query!r} for {q!r} retrieves {got}, expected {doc}")


def rag_script() -> list[ScriptEntry]:
    check_retrieval()
    fwd_q2, fwd_q1, planner, answers = [], [], [], []
    for q, _a, (q1, d1), (q2, d2), pred in QA:
        hop1_title = _title(d1) + " |"
        hop2_title = _title(d2) + " |"
        fwd_q2.append(ScriptEntry("forward", [QUERY_ANCHOR, q, hop1_title], q2))
        fwd_q1.append(ScriptEntry("forward", [QUERY_ANCHOR, q], q1))
        answers.append(ScriptEntry("forward", [ANSWER_ANCHOR, q],
                                   f"The context links the question to the answer.\nAnswer: {pred}"))
        finish = {"thought": "I have enough information.", "name": "finish", "args": [], "kwargs": {"answer": pred}}
        step2 = {"thought": "Now look up the second entity.", "name": "retrieve", "args": [q2], "kwargs": {}}
        step1 = {"thought": "First find the bridge entity.", "name": "retrieve", "args": [q1], "kwargs": {}}
        planner.append(ScriptEntry("forward", [PLANNER_ANCHOR, q, hop2_title], _fenced(finish)))
        planner.append(ScriptEntry("forward", [PLANNER_ANCHOR, q, hop1_title], _fenced(step2)))
        planner.append(ScriptEntry("forward", [PLANNER_ANCHOR, q], _fenced(step1)))
    optimizer = [
        ScriptEntry("optimizer", [f"<NAME> {name} </NAME>"], _proposal("Address the feedback.", value))
        for name, value in RAG_PROPOSALS.items()
    ]
    return [
        *planner, *fwd_q2, *fwd_q1, *answers,
        ScriptEntry("backward", ["<OUTPUTS/SCORE>"],
                    "The predicted answer differs from the ground truth; the evidence for the second hop was not used."),
        ScriptEntry("backward", [],
                    "The retrieved context for the second hop should be used to pin down the final entity."),
        *optimizer,
        ScriptEntry("optimizer", [], _proposal("Rephrase the variable.", "Answer the question using the context.")),
    ]


RAG_PROPOSALS = {
    "answer_instruction": "Answer questions with short factoid answers taken verbatim from the context.",
    "query_instruction": "Write a short search query naming the entity you still need to look up.",
    "query_instruction_0": "Write a short search query naming the first entity in the question.",
    "query_instruction_1": "Write a short search query naming the entity found in the context.",
    "task_desc": "Plan tool calls step by step: retrieve facts for each entity, then finish with a short answer.",
    "finish_docstring": "finish(answer: str): Finish with the short answer copied from the documents.",
}


def _fenced(obj: dict[str, Any]) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


# -- output ---------------------------------------------------------------------


def _jsonl(rows: list[dict[str, Any]]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)


def build_all() -> dict[str, str]:
    oc = object_count_samples()
    return {
        "object_count.jsonl": _jsonl([{k: s[k] for k in ("id", "question", "answer")} for s in oc]),
        "object_count.script.jsonl": _jsonl([e.to_dict() for e in object_count_script(oc)]),
        "trec.jsonl": _jsonl(trec_samples()),
        "trec.script.jsonl": _jsonl([e.to_dict() for e in trec_script()]),
        "hotpot.jsonl": _jsonl(qa_samples()),
        "corpus.jsonl": _jsonl(corpus_records()),
        "rag.script.jsonl": _jsonl([e.to_dict() for e in rag_script()]),
    }


def write_all(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in build_all().items():
        path = directory / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).parent / "data")
    for p in write_all(target):
        print(p)
