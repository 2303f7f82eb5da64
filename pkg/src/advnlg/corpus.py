"""Corpus handling: MR parsing, delexicalization, linearization, vocabularies."""
import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

PLACEHOLDER_RE = re.compile(r"⟨[^⟩\s]+⟩")
_TOKEN_RE = re.compile(r"⟨[^⟩\s]+⟩|\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,!?;:)%'-")
_NO_SPACE_AFTER = set("(£$'-")


class ParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class LoadError(ValueError):
    def __init__(self, message, index, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}entry {index}: {message}")
        self.reason, self.index, self.path = message, index, path


@dataclass(frozen=True)
class MeaningRepresentation:
    dialogue_act: str
    slots: tuple
    raw: str = field(default="", compare=False)


@dataclass
class DelexicalizedPair:
    input_tokens: list
    target_tokens: list
    substitutions: dict
    audit: list = field(default_factory=list)


def slot_key(slot):
    return re.sub(r"[^0-9a-z]", "", slot.lower())


def placeholder(slot):
    return "⟨" + slot.strip().replace(" ", "_") + "⟩"


def is_placeholder(token):
    return bool(PLACEHOLDER_RE.fullmatch(token))


@dataclass
class DelexPolicy:
    """Which slots stay verbatim and how closed-class values are realized.

    ``keep`` lists closed-class slot names (compared after dropping case and
    punctuation); ``keep_values`` are values never delexicalized whatever the
    slot; ``realizations`` maps slot -> value -> accepted surface phrases for
    the slot-coverage proxy.
    """

    keep: tuple = ("familyFriendly", "priceRange", "customer rating")
    keep_values: tuple = ("yes", "no", "none", "dontcare")
    realizations: dict = field(default_factory=lambda: {
        "familyFriendly": {
            "yes": ["family friendly", "family-friendly", "kid friendly", "kids friendly",
                    "child friendly", "children friendly", "family oriented"],
            "no": ["not family friendly", "not family-friendly", "not kid friendly",
                   "not child friendly", "not children friendly", "non family friendly",
                   "no kids", "not suitable for families"],
        },
        "customer rating": {
            "low": ["low rating", "low customer rating", "rated low", "low rated"],
            "average": ["average rating", "average customer rating", "rated average"],
            "high": ["high rating", "high customer rating", "rated high", "highly rated"],
        },
        "priceRange": {
            "cheap": ["cheap", "inexpensive", "low price"],
            "moderate": ["moderate", "moderately priced", "average price"],
            "high": ["high price", "expensive", "high priced"],
        },
    })

    def is_closed(self, slot, value):
        keep = {slot_key(s) for s in self.keep}
        return slot_key(slot) in keep or value.strip().lower() in self.keep_values

    def realizations_for(self, slot, value):
        for s, table in self.realizations.items():
            if slot_key(s) == slot_key(slot):
                for v, phrases in table.items():
                    if v.lower() == value.strip().lower():
                        return list(phrases)
        return [value]

    def to_json(self):
        return {"keep": list(self.keep), "keep_values": list(self.keep_values),
                "realizations": self.realizations}

    @classmethod
    def from_json(cls, obj):
        pol = cls()
        if "keep" in obj:
            pol.keep = tuple(obj["keep"])
        if "keep_values" in obj:
            pol.keep_values = tuple(v.lower() for v in obj["keep_values"])
        if "realizations" in obj:
            pol.realizations = obj["realizations"]
        return pol

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text, lowercase=True):
    """Split into word and punctuation tokens; placeholders survive intact."""
    out = []
    for tok in _TOKEN_RE.findall(text):
        if lowercase and not tok.startswith("⟨"):
            tok = tok.lower()
        out.append(tok)
    return out


def detokenize(tokens):
    text = ""
    for tok in tokens:
        if not text:
            text = tok
        elif tok in _NO_SPACE_BEFORE or text[-1] in _NO_SPACE_AFTER:
            text += tok
        else:
            text += " " + tok
    return text


# ---------------------------------------------------------------------------
# meaning representations


def _byte_offset(text, i):
    return len(text[:i].encode("utf-8"))


def parse_mr(text, dialogue_act="inform"):
    """Parse E2E ``slot[value], slot[value]`` syntax."""
    slots = []
    i, n = 0, len(text)
    while True:
        while i < n and text[i].isspace():
            i += 1
        if i >= n:
            if slots and text.rstrip().endswith(","):
                raise ParseError("trailing comma", _byte_offset(text, i))
            break
        j = i
        while j < n and text[j] not in "[],":
            j += 1
        if j >= n or text[j] != "[":
            raise ParseError("expected '[' after slot name", _byte_offset(text, j))
        name = text[i:j].strip()
        if not name:
            raise ParseError("empty slot name", _byte_offset(text, i))
        k = j + 1
        while k < n and text[k] not in "[]":
            k += 1
        if k >= n:
            raise ParseError("unterminated value", _byte_offset(text, k))
        if text[k] == "[":
            raise ParseError("nested '[' in value", _byte_offset(text, k))
        slots.append((name, text[j + 1:k].strip()))
        i = k + 1
        while i < n and text[i].isspace():
            i += 1
        if i < n:
            if text[i] != ",":
                raise ParseError("expected ',' between slots", _byte_offset(text, i))
            i += 1
            if not text[i:].strip():
                raise ParseError("trailing comma", _byte_offset(text, i))
    return MeaningRepresentation(dialogue_act, tuple(slots), raw=text)


_DA_RE = re.compile(r"^\s*([?\w]+)\s*\((.*)\)\s*$", re.S)


def parse_da(text):
    """Parse RNN-LG ``act(slot=value;slot='value')`` syntax."""
    m = _DA_RE.match(text)
    if not m:
        raise ParseError("expected act(slot=value;...)", 0)
    act, body = m.group(1), m.group(2)
    slots = []
    offset = text.index("(") + 1
    for part in body.split(";") if body.strip() else []:
        if "=" in part:
            name, value = part.split("=", 1)
            value = value.strip()
            if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
                value = value[1:-1]
        else:
            name, value = part, ""
        if not name.strip():
            raise ParseError("empty slot name", _byte_offset(text, offset))
        slots.append((name.strip(), value.strip()))
        offset += len(part) + 1
    return MeaningRepresentation(act, tuple(slots), raw=text)


def format_mr(mr):
    if mr.raw:
        return mr.raw
    if mr.dialogue_act == "inform":
        return ", ".join(f"{s}[{v}]" for s, v in mr.slots)
    return mr.dialogue_act + "(" + ";".join(f"{s}={v}" for s, v in mr.slots) + ")"


# ---------------------------------------------------------------------------
# delexicalization


def _value_pattern(value):
    return re.compile(r"(?<!\w)" + re.escape(value) + r"(?!\w)", re.IGNORECASE)


def mr_substitutions(mr, policy):
    """Placeholder assignment for every open-class slot of ``mr`` (in slot order)."""
    subs, assigned = {}, []
    for slot, value in mr.slots:
        if not value or policy.is_closed(slot, value):
            assigned.append(None)
            continue
        ph = placeholder(slot)
        k = 2
        while ph in subs and subs[ph] != value:
            ph = placeholder(f"{slot}_{k}")
            k += 1
        subs[ph] = value
        assigned.append(ph)
    return subs, assigned


def linearize(mr, policy=None, assigned=None):
    """BOS, act, then slot-name token + value tokens per slot, EOS."""
    if assigned is None:
        assigned = mr_substitutions(mr, policy)[1] if policy is not None else [None] * len(mr.slots)
    seq = [BOS, mr.dialogue_act.lower()]
    for (slot, value), ph in zip(mr.slots, assigned):
        seq.append(slot.strip().replace(" ", "_"))
        seq.extend([ph] if ph is not None else tokenize(value))
    seq.append(EOS)
    return seq


def delexicalize_text(utterance, replacements):
    """Replace each (value, placeholder) mention, longest value first.

    Matches are case-insensitive on word boundaries; spans already claimed by a
    longer value are never touched again. Returns the text and the list of
    values that were not found.
    """
    claimed = []
    missing = []
    order = sorted(range(len(replacements)), key=lambda i: -len(replacements[i][0]))
    for i in order:
        value, ph = replacements[i]
        found = False
        for m in _value_pattern(value).finditer(utterance):
            s, e = m.span()
            if any(s < ce and cs < e for cs, ce, _ in claimed):
                continue
            claimed.append((s, e, ph))
            found = True
        if not found:
            missing.append(value)
    out, pos = [], 0
    for s, e, ph in sorted(claimed):
        out.append(utterance[pos:s])
        out.append(ph)
        pos = e
    out.append(utterance[pos:])
    return "".join(out), missing


def delexicalize(mr, utterance, policy=None):
    policy = policy or DelexPolicy()
    if not utterance.strip():
        raise ValueError("delexicalize needs a nonempty utterance")
    subs, assigned = mr_substitutions(mr, policy)
    reps = [(value, ph) for (slot, value), ph in zip(mr.slots, assigned) if ph is not None]
    text, missing = delexicalize_text(utterance, reps)
    audit = []
    for (slot, value), ph in zip(mr.slots, assigned):
        if ph is not None and value in missing:
            audit.append(f"unmatched\t{format_mr(mr)}\t{slot}={value}")
    target = [BOS] + tokenize(text) + [EOS]
    return DelexicalizedPair(linearize(mr, assigned=assigned), target, subs, audit)


def relexicalize(tokens, substitutions, audit=None):
    words = []
    for tok in tokens:
        if tok in RESERVED:
            continue
        if is_placeholder(tok):
            if tok in substitutions:
                words.append(substitutions[tok])
                continue
            if audit is not None:
                audit.append(f"orphan\t{tok}")
        words.append(tok)
    return detokenize(words)


def normalize(text):
    return " ".join(tokenize(text))


# ---------------------------------------------------------------------------
# loading


def load_corpus(path, fmt="e2e-csv"):
    """Return a list of ``(MeaningRepresentation, [reference, ...])``, one per row."""
    loaders = {"e2e-csv": _load_e2e, "rnnlg-json": _load_rnnlg}
    if fmt not in loaders:
        raise ValueError(f"unknown corpus format {fmt!r}")
    try:
        return loaders[fmt](path)
    except LoadError as exc:
        raise LoadError(exc.reason, exc.index, path) from None


def _load_e2e(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LoadError("missing header", 0)
    header = [h.strip().lower() for h in rows[0]]
    if header != ["mr", "ref"]:
        raise LoadError(f"header must be 'mr,ref', got {rows[0]!r}", 0)
    out = []
    for i, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != 2:
            raise LoadError(f"expected 2 fields, got {len(row)}", i)
        try:
            mr = parse_mr(row[0])
        except ParseError as exc:
            raise LoadError(str(exc), i) from exc
        out.append((mr, [row[1]]))
    return out


def _load_rnnlg(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"invalid JSON: {exc}", 0) from exc
    if not isinstance(data, list):
        raise LoadError("top level must be an array", 0)
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, list) or len(entry) < 2 or not all(isinstance(x, str) for x in entry[:2]):
            raise LoadError("expected [da_string, reference, ...]", i)
        try:
            mr = parse_da(entry[0])
        except ParseError as exc:
            raise LoadError(str(exc), i) from exc
        out.append((mr, [entry[1]]))
    return out


def group_by_mr(entries):
    """Merge rows sharing the exact raw MR string into multi-reference entries."""
    groups, order = {}, []
    for mr, refs in entries:
        key = format_mr(mr)
        if key not in groups:
            groups[key] = (mr, [])
            order.append(key)
        groups[key][1].extend(refs)
    return [groups[k] for k in order]


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens=()):
        self.tokens = list(RESERVED)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for t in tokens:
            if t not in self.index:
                self.index[t] = len(self.tokens)
                self.tokens.append(t)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        return self.index.get(token, UNK_ID)

    def token(self, i):
        return self.tokens[i]

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.tokens, fh, ensure_ascii=False, indent=0)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = json.load(fh)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(tokens[4:])


def build_vocab(pairs, min_count=1):
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for p in pairs:
        counts.update(t for t in p.input_tokens if t not in RESERVED)
        counts.update(t for t in p.target_tokens if t not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
