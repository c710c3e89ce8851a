"""Parsing, validation, and distillation of focus-centric reasoning traces.

A trace is a plain-text document of the form

    <think> ... reasoning with <FOCUS>one-sentence cues</FOCUS> in-line ... </think>
    <answer> ... final answer ... </answer>

Only the six tags above are recognized; anything else is ordinary text.  The
envelope is whitespace-tolerant: runs of whitespace may precede ``<think>``,
separate ``</think>`` from ``<answer>``, and follow ``</answer>``, but no
other content may appear there.

Guidance documents carry region markers of the form
``<SOT>[x1,y1,x2,y2]<EOT><image>`` whose coordinate quadruples become the
target-box labels paired with each focus span.

Validators never raise on rule violations; they accumulate them in a
:class:`ValidationReport`.  Character ranges in violations refer to offsets in
the trace's raw text, except for rule ``GUIDANCE_MARKERS`` whose offender
lives in the guidance string (its range is the empty range at 0 and the
message carries the guidance offset).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .boxes import BoxNorm

# recognized trace tags; all other angle-bracket text is ordinary content
_TAG_RE = re.compile(r"</?(?:think|FOCUS|answer)>")
_THINK_OPEN = "<think>"
_THINK_CLOSE = "</think>"
_FOCUS_OPEN = "<FOCUS>"
_FOCUS_CLOSE = "</FOCUS>"
_ANSWER_OPEN = "<answer>"
_ANSWER_CLOSE = "</answer>"

_NUM = r"[-+]?\d+(?:\.\d+)?"
_MARKER_RE = re.compile(
    r"<SOT>\[\s*(%s)\s*,\s*(%s)\s*,\s*(%s)\s*,\s*(%s)\s*\]<EOT><image>"
    % (_NUM, _NUM, _NUM, _NUM))

# square-bracketed tuple of two or more numbers reads as a coordinate
_COORD_RE = re.compile(r"\[\s*%s(?:\s*,\s*%s)+\s*\]" % (_NUM, _NUM))
_TAG_MENTION_RE = re.compile(r"<SOT>|<EOT>|<image>|\bSOT\b|\bEOT\b")

# image-manipulation phrasing banned in distilled reasoning; matched on word
# boundaries so "rescaled" and "cutting" stay legal
TOOL_LEXICON = ("zoom in", "crop", "cut", "resize", "scale", "tool",
                "selection")
_TOOL_RES = tuple(
    re.compile(r"\b" + r"\s+".join(re.escape(w) for w in phrase.split())
               + r"\b", re.IGNORECASE)
    for phrase in TOOL_LEXICON)

# opt-in lexicons: a focus sentence should contain a verb, and may be barred
# from naming colors; both are coarse word lists, off by default
VERB_LEXICON = frozenset(
    "is are was were be been being has have had must shall can may "
    "examine examines examined show shows holds hold contains contain "
    "sits sit stands stand appears appear lies lie displays display "
    "looks look points point".split())
COLOR_LEXICON = frozenset(
    "red orange yellow green blue purple violet pink brown black white "
    "gray grey golden silver beige teal cyan magenta maroon navy olive "
    "tan crimson".split())

RULE_CARDINALITY = "CARDINALITY"
RULE_ONE_SENTENCE = "ONE_SENTENCE"
RULE_NO_NUMERIC = "NO_NUMERIC"
RULE_NO_COORDINATE = "NO_COORDINATE"
RULE_NO_TAG_MENTION = "NO_TAG_MENTION"
RULE_DISTINCT_FOCUS = "DISTINCT_FOCUS"
RULE_FOCUS_ORDER = "FOCUS_ORDER"
RULE_NO_TOOL_VERB = "NO_TOOL_VERB"
RULE_RECROP_SINGLE_FOCUS = "RECROP_SINGLE_FOCUS"
RULE_FLOW_ORDER = "FLOW_ORDER"
RULE_GUIDANCE_MARKERS = "GUIDANCE_MARKERS"
RULE_HAS_VERB = "HAS_VERB"
RULE_NO_COLOR_WORD = "NO_COLOR_WORD"

ALL_RULES = (RULE_CARDINALITY, RULE_ONE_SENTENCE, RULE_NO_NUMERIC,
             RULE_NO_COORDINATE, RULE_NO_TAG_MENTION, RULE_DISTINCT_FOCUS,
             RULE_FOCUS_ORDER, RULE_NO_TOOL_VERB, RULE_RECROP_SINGLE_FOCUS,
             RULE_FLOW_ORDER, RULE_GUIDANCE_MARKERS, RULE_HAS_VERB,
             RULE_NO_COLOR_WORD)


class ParseError(ValueError):
    """Structural failure; ``pos`` is the character offset of the problem."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at offset {pos}")
        self.pos = pos


class MarkerError(ValueError):
    """Malformed region marker; ``pos`` is the offset in the guidance."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} at offset {pos}")
        self.pos = pos


@dataclass(frozen=True)
class FocusSpan:
    text: str
    char_range: tuple[int, int]  # inner text, offsets into the raw document


@dataclass(frozen=True)
class FocusTrace:
    think_text: str
    focus_spans: tuple[FocusSpan, ...]
    answer_text: str
    raw: str

    @property
    def think_offset(self) -> int:
        """Offset of think_text within raw."""
        return self.raw.index(_THINK_OPEN) + len(_THINK_OPEN)


@dataclass(frozen=True)
class SotMarker:
    coords: tuple[float, float, float, float]
    char_range: tuple[int, int]  # whole marker, offsets into the guidance

    def box(self, image_size: tuple[int, int] | None = None) -> BoxNorm:
        """Coordinates as a unit-square box; pixel quadruples are divided by
        image_size, quadruples passed without one must already be normalized."""
        x1, y1, x2, y2 = self.coords
        if image_size is not None:
            w, h = image_size
            if w <= 0 or h <= 0:
                raise ValueError(f"bad image size {image_size}")
            x1, y1, x2, y2 = x1 / w, y1 / h, x2 / w, y2 / h
        b = BoxNorm(x1, y1, x2, y2)
        if not b.in_unit_square(tol=1e-9):
            raise ValueError(f"box outside unit square: {b.as_tuple()}")
        return b


@dataclass(frozen=True)
class Violation:
    rule_id: str
    message: str
    char_range: tuple[int, int]


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def verdict(self) -> str:
        return "pass" if not self.violations else "fail"

    @property
    def passed(self) -> bool:
        return not self.violations

    def rule_ids(self) -> tuple[str, ...]:
        return tuple(v.rule_id for v in self.violations)

    def to_json_dict(self) -> dict:
        return {"verdict": self.verdict,
                "violations": [{"rule_id": v.rule_id, "message": v.message,
                                "char_range": list(v.char_range)}
                               for v in self.violations]}


@dataclass(frozen=True)
class TrainingPair:
    focus_text: str
    target_box: BoxNorm
    image_size: tuple[int, int]
    trace_id: str

    def to_json_dict(self) -> dict:
        return {"trace_id": self.trace_id, "focus_text": self.focus_text,
                "target_box": list(self.target_box.as_tuple()),
                "image_size": list(self.image_size)}


# -- parsing ---------------------------------------------------------------------------


def _first_nonspace(text: str, base: int) -> int:
    for i, ch in enumerate(text):
        if not ch.isspace():
            return base + i
    return base


def parse_trace(raw: str) -> FocusTrace:
    """Decompose a raw trace document, or raise ParseError with a position."""
    tags = [(m.start(), m.end(), m.group()) for m in _TAG_RE.finditer(raw)]
    if not tags or tags[0][2] != _THINK_OPEN:
        pos = tags[0][0] if tags else 0
        raise ParseError(f"expected {_THINK_OPEN} as the first tag", pos)
    t_start, t_end, _ = tags[0]
    if raw[:t_start].strip():
        raise ParseError("content before <think>", _first_nonspace(raw[:t_start], 0))

    spans: list[FocusSpan] = []
    state = "think"
    focus_open = think_close = think_close_end = -1
    answer_open = answer_close = answer_close_end = -1
    for start, end, tag in tags[1:]:
        if state == "think":
            if tag == _FOCUS_OPEN:
                focus_open, state = end, "focus"
            elif tag == _THINK_CLOSE:
                think_close, think_close_end, state = start, end, "between"
            elif tag == _FOCUS_CLOSE:
                raise ParseError("unmatched </FOCUS>", start)
            else:
                raise ParseError(f"{tag} inside <think>", start)
        elif state == "focus":
            if tag == _FOCUS_CLOSE:
                spans.append(FocusSpan(raw[focus_open:start], (focus_open, start)))
                state = "think"
            elif tag == _FOCUS_OPEN:
                raise ParseError("nested focus", start)
            else:
                raise ParseError("unclosed <FOCUS>", start)
        elif state == "between":
            if tag == _ANSWER_OPEN:
                answer_open, state = end, "answer"
                if raw[think_close_end:start].strip():
                    raise ParseError(
                        "content between </think> and <answer>",
                        _first_nonspace(raw[think_close_end:start], think_close_end))
            else:
                raise ParseError(f"expected <answer> after </think>, found {tag}", start)
        elif state == "answer":
            if tag == _ANSWER_CLOSE:
                answer_close, answer_close_end, state = start, end, "done"
            else:
                raise ParseError(f"{tag} inside <answer>", start)
        else:  # done
            raise ParseError(f"{tag} after </answer>", start)

    if state != "done":
        missing = {"think": "</think>", "focus": "</FOCUS>",
                   "between": "<answer>", "answer": "</answer>"}[state]
        raise ParseError(f"missing {missing}", len(raw))
    if raw[answer_close_end:].strip():
        raise ParseError("content after </answer>",
                         _first_nonspace(raw[answer_close_end:], answer_close_end))

    return FocusTrace(think_text=raw[t_end:think_close],
                      focus_spans=tuple(spans),
                      answer_text=raw[answer_open:answer_close],
                      raw=raw)


def serialize_trace(trace: FocusTrace) -> str:
    """Canonical form: inner texts verbatim, single newline between blocks.
    parse -> serialize -> parse is a fixed point."""
    return (f"{_THINK_OPEN}{trace.think_text}{_THINK_CLOSE}\n"
            f"{_ANSWER_OPEN}{trace.answer_text}{_ANSWER_CLOSE}")


def count_sot_markers(guidance: str) -> list[SotMarker]:
    """All region markers in document order; malformed ones raise MarkerError."""
    markers = []
    pos = 0
    while True:
        sot = guidance.find("<SOT>", pos)
        if sot < 0:
            break
        m = _MARKER_RE.match(guidance, sot)
        if m is None:
            eot = guidance.find("<EOT>", sot)
            if eot < 0:
                raise MarkerError("<SOT> without matching <EOT>", sot)
            if not guidance.startswith("<image>", eot + len("<EOT>")):
                raise MarkerError("missing <image> after <EOT>", eot)
            raise MarkerError("malformed coordinates", sot)
        coords = tuple(float(g) for g in m.groups())
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            raise MarkerError(f"degenerate box {list(coords)}", sot)
        markers.append(SotMarker(coords, (m.start(), m.end())))
        pos = m.end()
    return markers


# -- sentence machinery -------------------------------------------------------------


def _terminal_runs(text: str) -> list[int]:
    """End positions of runs of terminal punctuation (. ! ?) at bracket
    depth zero; each run is one sentence boundary."""
    runs, depth, in_run = [], 0, False
    for i, ch in enumerate(text):
        if ch in "([{":
            depth += 1
            in_run = False
        elif ch in ")]}":
            depth = max(0, depth - 1)
            in_run = False
        elif ch in ".!?" and depth == 0:
            if not in_run:
                runs.append(i)
                in_run = True
            else:
                runs[-1] = i
        else:
            in_run = False
    return runs


def _has_sentence(text: str) -> bool:
    return bool(_terminal_runs(text))


# -- validators -----------------------------------------------------------------------


def _content_violations(trace: FocusTrace, *, require_verb: bool,
                        ban_colors: bool) -> list[Violation]:
    out: list[Violation] = []
    seen: dict[str, int] = {}
    for i, span in enumerate(trace.focus_spans):
        rng = span.char_range
        s = span.text.strip()
        runs = _terminal_runs(s)
        if not s or len(runs) != 1 or s[-1] not in ".!?":
            out.append(Violation(RULE_ONE_SENTENCE,
                                 f"focus {i + 1} is not exactly one sentence", rng))
        if re.search(r"\d", span.text):
            out.append(Violation(RULE_NO_NUMERIC,
                                 f"focus {i + 1} contains a digit", rng))
        if _COORD_RE.search(span.text):
            out.append(Violation(RULE_NO_COORDINATE,
                                 f"focus {i + 1} contains a coordinate tuple", rng))
        if _TAG_MENTION_RE.search(span.text):
            out.append(Violation(RULE_NO_TAG_MENTION,
                                 f"focus {i + 1} mentions a region-marker tag", rng))
        words = {w.strip(".,;:!?()[]\"'").casefold() for w in span.text.split()}
        if require_verb and not (words & VERB_LEXICON):
            out.append(Violation(RULE_HAS_VERB,
                                 f"focus {i + 1} has no verb from the lexicon", rng))
        if ban_colors and (words & COLOR_LEXICON):
            out.append(Violation(RULE_NO_COLOR_WORD,
                                 f"focus {i + 1} names a color", rng))
        key = " ".join(span.text.split()).casefold()
        if key in seen:
            out.append(Violation(
                RULE_DISTINCT_FOCUS,
                f"focus {i + 1} duplicates focus {seen[key] + 1}", rng))
        else:
            seen[key] = i
    for i in range(len(trace.focus_spans) - 1):
        a, b = trace.focus_spans[i], trace.focus_spans[i + 1]
        if a.char_range[1] > b.char_range[0]:
            out.append(Violation(RULE_FOCUS_ORDER,
                                 f"focus {i + 2} does not follow focus {i + 1}",
                                 b.char_range))
    return out


def _guidance_violations(guidance: str) -> tuple[list[SotMarker], list[Violation]]:
    try:
        return count_sot_markers(guidance), []
    except MarkerError as exc:
        return [], [Violation(RULE_GUIDANCE_MARKERS, str(exc), (0, 0))]


def _cardinality_violations(trace: FocusTrace,
                            markers: list[SotMarker]) -> list[Violation]:
    expected = max(1, len(markers))
    if len(trace.focus_spans) != expected:
        return [Violation(RULE_CARDINALITY,
                          f"expected {expected} focus spans for "
                          f"{len(markers)} region markers, found "
                          f"{len(trace.focus_spans)}", (0, len(trace.raw)))]
    return []


def _tool_violations(trace: FocusTrace) -> list[Violation]:
    out = []
    base = trace.think_offset
    for rx in _TOOL_RES:
        for m in rx.finditer(trace.think_text):
            out.append(Violation(RULE_NO_TOOL_VERB,
                                 f"forbidden term '{m.group()}'",
                                 (base + m.start(), base + m.end())))
    out.sort(key=lambda v: v.char_range)
    return out


def _flow_violations(trace: FocusTrace) -> list[Violation]:
    if len(trace.focus_spans) != 1:
        return []
    span = trace.focus_spans[0]
    base = trace.think_offset
    before = trace.raw[base:span.char_range[0] - len(_FOCUS_OPEN)]
    after = trace.raw[span.char_range[1] + len(_FOCUS_CLOSE):
                      base + len(trace.think_text)]
    out = []
    if not _has_sentence(before):
        out.append(Violation(RULE_FLOW_ORDER,
                             "no context sentence before the focus",
                             span.char_range))
    if not _has_sentence(after):
        out.append(Violation(RULE_FLOW_ORDER,
                             "no observation sentence after the focus",
                             span.char_range))
    return out


def validate_vgr(trace: FocusTrace, guidance: str, *, require_verb: bool = False,
                 ban_colors: bool = False) -> ValidationReport:
    """Cardinality against guidance markers plus per-focus content rules."""
    markers, viols = _guidance_violations(guidance)
    if not viols:
        viols += _cardinality_violations(trace, markers)
    viols += _content_violations(trace, require_verb=require_verb,
                                 ban_colors=ban_colors)
    return ValidationReport(tuple(viols))


def validate_singlepass(trace: FocusTrace, guidance: str, *,
                        require_verb: bool = False,
                        ban_colors: bool = False) -> ValidationReport:
    """All VGR rules plus the image-manipulation lexicon scan."""
    rep = validate_vgr(trace, guidance, require_verb=require_verb,
                       ban_colors=ban_colors)
    return ValidationReport(rep.violations + tuple(_tool_violations(trace)))


def validate_recrop(trace: FocusTrace, guidance: str, *,
                    require_verb: bool = False,
                    ban_colors: bool = False) -> ValidationReport:
    """Single-focus collapse of a trial-and-error guidance: content and style
    rules apply, marker cardinality does not (the history is deliberately
    dropped), exactly one focus must sit strictly mid-reasoning."""
    _, viols = _guidance_violations(guidance)
    viols += _content_violations(trace, require_verb=require_verb,
                                 ban_colors=ban_colors)
    viols += _tool_violations(trace)
    if len(trace.focus_spans) != 1:
        viols.append(Violation(RULE_RECROP_SINGLE_FOCUS,
                               f"expected exactly 1 focus span, found "
                               f"{len(trace.focus_spans)}", (0, len(trace.raw))))
    viols += _flow_violations(trace)
    return ValidationReport(tuple(viols))


VALIDATORS = {"vgr": validate_vgr, "singlepass": validate_singlepass,
              "recrop": validate_recrop}


# -- distillation ----------------------------------------------------------------------


def normalize_answer(answer: str) -> str:
    """Strip \\boxed{...} wrappers (recursively) and whitespace; reject
    coordinate-like output and unbalanced braces."""
    out = answer.strip()
    while True:
        idx = out.find("\\boxed{")
        if idx < 0:
            break
        depth, j = 1, idx + len("\\boxed{")
        while j < len(out) and depth:
            if out[j] == "{":
                depth += 1
            elif out[j] == "}":
                depth -= 1
            j += 1
        if depth:
            raise ValueError("unbalanced braces in \\boxed{...}")
        out = (out[:idx] + out[idx + len("\\boxed{"):j - 1] + out[j:]).strip()
    if _COORD_RE.search(out):
        raise ValueError(f"coordinate-like answer: {out!r}")
    return out


def distill_recrop(markers: list[SotMarker],
                   image_size: tuple[int, int] | None = None) -> BoxNorm:
    """The last marker by document position is the sole target label."""
    if not markers:
        raise ValueError("no region markers to distill")
    last = max(markers, key=lambda m: m.char_range[0])
    return last.box(image_size)


def emit_training_pairs(trace: FocusTrace, markers: list[SotMarker],
                        image_size: tuple[int, int],
                        trace_id: str = "") -> list[TrainingPair]:
    """Pair the i-th focus span with the i-th marker box.  A single-focus
    trace over a multi-marker guidance is the recrop collapse: it pairs with
    the last marker only.  Any other count mismatch is an error."""
    spans = trace.focus_spans
    if len(spans) == len(markers):
        chosen = list(markers)
    elif len(spans) == 1 and len(markers) > 1:
        chosen = [max(markers, key=lambda m: m.char_range[0])]
    else:
        raise ValueError(f"focus/marker count mismatch: {len(spans)} spans, "
                         f"{len(markers)} markers")
    w, h = image_size
    return [TrainingPair(span.text.strip(), m.box((w, h)), (w, h), trace_id)
            for span, m in zip(spans, chosen)]


def summarize_reports(reports: list[ValidationReport]) -> dict:
    """Corpus-level tally: {total, passed, failures_by_rule}."""
    by_rule: dict[str, int] = {}
    for rep in reports:
        for v in rep.violations:
            by_rule[v.rule_id] = by_rule.get(v.rule_id, 0) + 1
    return {"total": len(reports),
            "passed": sum(1 for r in reports if r.passed),
            "failures_by_rule": dict(sorted(by_rule.items()))}