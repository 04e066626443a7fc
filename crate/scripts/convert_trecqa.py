#!/usr/bin/env python3
"""Convert the TREC-QA answer-selection XML distribution to TSV.

The jacana release (jacana-qa-naacl2013-data-results) stores each question as

    <QApairs id='1.1'>
    <question>
    tok<TAB>tok<TAB>...        <- tokens (first line; POS/NER/deps lines follow)
    ...
    </question>
    <positive>
    tok<TAB>tok ...
    ...
    </positive>
    <negative>
    ...
    </negative>
    </QApairs>

Output rows are `qid<TAB>label<TAB>question<TAB>answer`, grouped by question,
candidates in file order. Usual mapping:

    train2393.cleanup.xml                -> train-all.tsv
    train-less-than-40.manual-edit.xml   -> train.tsv
    dev-less-than-40.manual-edit.xml     -> dev.tsv
    test-less-than-40.manual-edit.xml    -> test.tsv

usage: convert_trecqa.py INPUT.xml OUTPUT.tsv
"""
import re
import sys

OPEN = re.compile(r"<QApairs\s+id\s*=\s*['\"]([^'\"]+)['\"]\s*>")
SECTIONS = {"question": None, "positive": 1, "negative": 0}


def clean(line):
    return " ".join(t for t in line.split("\t") if t.strip()).strip()


def convert(lines):
    rows = []
    qid = question = None
    section = None
    want_tokens = False
    for raw in lines:
        line = raw.strip("\r\n")
        m = OPEN.match(line.strip())
        if m:
            qid, question = m.group(1), None
            continue
        tag = line.strip()
        if tag.startswith("</"):
            section, want_tokens = None, False
            if tag == "</QApairs>":
                qid = None
            continue
        if tag.startswith("<") and tag.endswith(">") and tag[1:-1] in SECTIONS:
            section, want_tokens = tag[1:-1], True
            continue
        if want_tokens and section is not None and qid is not None:
            text = clean(line)
            want_tokens = False
            if section == "question":
                question = text
            elif question is None:
                raise ValueError(f"{qid}: candidate before question")
            else:
                rows.append((qid, SECTIONS[section], question, text))
    return rows


def main(argv):
    if len(argv) != 3:
        sys.exit(__doc__)
    with open(argv[1], encoding="utf-8") as f:
        rows = convert(f)
    with open(argv[2], "w", encoding="utf-8") as f:
        f.write(f"# converted from {argv[1]}\n")
        for qid, label, q, a in rows:
            f.write(f"{qid}\t{label}\t{q}\t{a}\n")
    print(f"{len({r[0] for r in rows})} questions, {len(rows)} pairs", file=sys.stderr)


if __name__ == "__main__":
    main(sys.argv)
