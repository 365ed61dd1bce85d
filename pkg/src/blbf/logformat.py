"""Impression log data model and the line-oriented log file format.

An impression occupies ``nbCandidates + 1`` lines::

    example ${exID}: ${hashID} ${wasAdClicked} ${propensity} ${nbSlots} ${nbCandidates} ${featId}:${v} ...
    ${clicked} exid:${exID} ${featId}:${v} ...
    ...

The first ``nbSlots`` candidate lines are the displayed products, in slot
order.  Features 1 and 2 are numeric; every other feature id is categorical
and may carry several codes, written as repeated ``id:code`` pairs.
"""
from __future__ import annotations

import gzip
import io
import math
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping, Sequence, Union

NUM_FEATURES = 35
NUMERIC_FEATURE_IDS = frozenset({1, 2})
MAX_SLOTS = 6

FeatureValue = Union[float, frozenset]
FeatureVector = Mapping[int, FeatureValue]


class LogFormatError(ValueError):
    """Raised when a log cannot be read at all (e.g. a corrupt gzip container)."""


class ParseError(ValueError):
    """A malformed impression.

    ``line`` is the 1-based line number in the source, ``field`` names the
    offending field and ``impression`` is the 0-based index of the impression
    in the stream (when known).
    """

    def __init__(self, message: str, line: int | None = None, field: str | None = None,
                 impression: int | None = None):
        self.message = message
        self.line = line
        self.field = field
        self.impression = impression
        super().__init__(str(self))

    def __str__(self) -> str:
        where = []
        if self.impression is not None:
            where.append(f"impression {self.impression}")
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.field is not None:
            where.append(f"field {self.field}")
        prefix = ", ".join(where)
        return f"{prefix}: {self.message}" if prefix else self.message


class RecordError(ValueError):
    """An ImpressionRecord violates one of its invariants."""


@dataclass(frozen=True)
class CandidateRecord:
    clicked: int
    features: FeatureVector = field(default_factory=dict)


@dataclass(frozen=True)
class ImpressionRecord:
    ex_id: int
    hash_id: str
    was_ad_clicked: int
    propensity: float
    nb_slots: int
    display_features: FeatureVector
    candidates: tuple

    @property
    def nb_candidates(self) -> int:
        return len(self.candidates)

    @property
    def slot_clicks(self) -> tuple:
        return tuple(c.clicked for c in self.candidates[: self.nb_slots])


# ---------------------------------------------------------------------------
# validation


def check_feature_vector(features: FeatureVector, where: str = "features") -> None:
    if len(features) > NUM_FEATURES:
        raise RecordError(f"{where}: more than {NUM_FEATURES} feature ids")
    for fid, value in features.items():
        if not isinstance(fid, int) or not 1 <= fid <= NUM_FEATURES:
            raise RecordError(f"{where}: feature id {fid!r} outside 1..{NUM_FEATURES}")
        if fid in NUMERIC_FEATURE_IDS:
            if isinstance(value, (frozenset, set)) or not math.isfinite(value):
                raise RecordError(f"{where}: feature {fid} must be a finite number")
        else:
            if not isinstance(value, frozenset) or not value:
                raise RecordError(f"{where}: feature {fid} must be a non-empty code set")
            if any((not isinstance(c, int)) or c < 0 for c in value):
                raise RecordError(f"{where}: feature {fid} codes must be non-negative ints")


def check_record(r: ImpressionRecord) -> None:
    """Raise RecordError if ``r`` breaks an ImpressionRecord invariant."""
    if r.ex_id < 0:
        raise RecordError("exID must be non-negative")
    if not r.hash_id or any(ch.isspace() for ch in r.hash_id):
        raise RecordError("hashID must be a non-empty token without whitespace")
    if not (r.propensity > 0 and math.isfinite(r.propensity)):
        raise RecordError(f"propensity must be positive and finite, got {r.propensity!r}")
    if not 1 <= r.nb_slots <= MAX_SLOTS:
        raise RecordError(f"nbSlots must be in 1..{MAX_SLOTS}, got {r.nb_slots}")
    if r.nb_slots > len(r.candidates):
        raise RecordError("nbSlots exceeds nbCandidates")
    if r.was_ad_clicked not in (0, 1):
        raise RecordError("wasAdClicked must be 0 or 1")
    if r.was_ad_clicked != int(any(r.slot_clicks)):
        raise RecordError("wasAdClicked disagrees with the displayed candidates' clicks")
    check_feature_vector(r.display_features, "display features")
    for j, cand in enumerate(r.candidates):
        if cand.clicked not in (0, 1):
            raise RecordError(f"candidate {j}: clicked must be 0 or 1")
        check_feature_vector(cand.features, f"candidate {j}")


# ---------------------------------------------------------------------------
# serialization


def _format_features(features: FeatureVector) -> list:
    out = []
    for fid in sorted(features):
        value = features[fid]
        if fid in NUMERIC_FEATURE_IDS:
            out.append(f"{fid}:{float(value)!r}")
        else:
            out.extend(f"{fid}:{code}" for code in sorted(value))
    return out


def serialize_impression(r: ImpressionRecord) -> list:
    """Render ``r`` as its header line followed by one line per candidate."""
    check_record(r)
    header = [
        "example", f"{r.ex_id}:", r.hash_id, str(r.was_ad_clicked), repr(float(r.propensity)),
        str(r.nb_slots), str(len(r.candidates)),
    ]
    lines = [" ".join(header + _format_features(r.display_features))]
    for j, cand in enumerate(r.candidates):
        clicked = cand.clicked if j < r.nb_slots else 0
        lines.append(" ".join([str(clicked), f"exid:{r.ex_id}"] + _format_features(cand.features)))
    return lines


def _parse_int(token: str, line: int, name: str, impression=None) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"expected an integer, got {token!r}", line, name, impression) from None


def _parse_flag(token: str, line: int, name: str, impression=None) -> int:
    if token not in ("0", "1"):
        raise ParseError(f"expected 0 or 1, got {token!r}", line, name, impression)
    return int(token)


def _parse_features(tokens: Sequence[str], line: int, impression=None) -> dict:
    numeric: dict = {}
    categorical: dict = {}
    for tok in tokens:
        fid_s, sep, val_s = tok.partition(":")
        if not sep:
            raise ParseError(f"malformed feature token {tok!r}", line, "feature", impression)
        fid = _parse_int(fid_s, line, "feature id", impression)
        if not 1 <= fid <= NUM_FEATURES:
            raise ParseError(f"feature id {fid} outside 1..{NUM_FEATURES}", line,
                             f"feature {fid}", impression)
        if fid in NUMERIC_FEATURE_IDS:
            if fid in numeric:
                raise ParseError("numeric feature carrying multiple values", line,
                                 f"feature {fid}", impression)
            try:
                value = float(val_s)
            except ValueError:
                raise ParseError(f"non-numeric value {val_s!r}", line, f"feature {fid}",
                                 impression) from None
            if not math.isfinite(value):
                raise ParseError("numeric feature must be finite", line, f"feature {fid}",
                                 impression)
            numeric[fid] = value
        else:
            code = _parse_int(val_s, line, f"feature {fid}", impression)
            if code < 0:
                raise ParseError("categorical codes must be non-negative", line,
                                 f"feature {fid}", impression)
            codes = categorical.setdefault(fid, set())
            if code in codes:
                raise ParseError(f"duplicate code {code}", line, f"feature {fid}", impression)
            codes.add(code)
    out = dict(numeric)
    out.update({fid: frozenset(codes) for fid, codes in categorical.items()})
    return out


def parse_impression(lines: Sequence[str], first_line: int = 1,
                     impression: int | None = None) -> ImpressionRecord:
    """Parse one impression from its header line and candidate lines.

    ``first_line`` is the line number of the header, used in diagnostics.
    """
    if not lines:
        raise ParseError("empty impression", first_line, "header", impression)
    tokens = lines[0].split()
    if not tokens or tokens[0] != "example":
        raise ParseError("header must begin with the token 'example'", first_line, "header",
                         impression)
    if len(tokens) < 7:
        raise ParseError("truncated header", first_line, "header", impression)
    if not tokens[1].endswith(":"):
        raise ParseError(f"malformed exID token {tokens[1]!r}", first_line, "exID", impression)
    ex_id = _parse_int(tokens[1][:-1], first_line, "exID", impression)
    if ex_id < 0:
        raise ParseError("exID must be non-negative", first_line, "exID", impression)
    hash_id = tokens[2]
    was_clicked = _parse_flag(tokens[3], first_line, "wasAdClicked", impression)
    try:
        propensity = float(tokens[4])
    except ValueError:
        raise ParseError(f"malformed propensity {tokens[4]!r}", first_line, "propensity",
                         impression) from None
    if not (propensity > 0 and math.isfinite(propensity)):
        raise ParseError(f"non-positive propensity {tokens[4]}", first_line, "propensity",
                         impression)
    nb_slots = _parse_int(tokens[5], first_line, "nbSlots", impression)
    nb_candidates = _parse_int(tokens[6], first_line, "nbCandidates", impression)
    if not 1 <= nb_slots <= MAX_SLOTS:
        raise ParseError(f"nbSlots {nb_slots} outside 1..{MAX_SLOTS}", first_line, "nbSlots",
                         impression)
    if nb_candidates < nb_slots:
        raise ParseError("nbCandidates smaller than nbSlots", first_line, "nbCandidates",
                         impression)
    if len(lines) - 1 != nb_candidates:
        raise ParseError(
            f"candidate count mismatch: header declares {nb_candidates}, found {len(lines) - 1}",
            first_line, "nbCandidates", impression)
    display = _parse_features(tokens[7:], first_line, impression)

    candidates = []
    for j, text in enumerate(lines[1:]):
        line_no = first_line + 1 + j
        ctoks = text.split()
        if len(ctoks) < 2:
            raise ParseError("truncated candidate line", line_no, "candidate", impression)
        clicked = _parse_flag(ctoks[0], line_no, "clicked", impression)
        if not ctoks[1].startswith("exid:"):
            raise ParseError(f"expected exid:<id>, got {ctoks[1]!r}", line_no, "exid", impression)
        if _parse_int(ctoks[1][5:], line_no, "exid", impression) != ex_id:
            raise ParseError("candidate exid differs from header exID", line_no, "exid",
                             impression)
        if j >= nb_slots:
            clicked = 0
        candidates.append(CandidateRecord(clicked, _parse_features(ctoks[2:], line_no, impression)))

    if was_clicked != int(any(c.clicked for c in candidates[:nb_slots])):
        raise ParseError("wasAdClicked disagrees with the displayed candidates' clicks",
                         first_line, "wasAdClicked", impression)
    return ImpressionRecord(ex_id, hash_id, was_clicked, propensity, nb_slots, display,
                            tuple(candidates))


# ---------------------------------------------------------------------------
# streaming


def _open_text(source, compressed: bool) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        raw = open(source, "rb")
    else:
        raw = source
    if compressed:
        raw = gzip.GzipFile(fileobj=raw, mode="rb")
    return io.TextIOWrapper(raw, encoding="utf-8", newline=None)


def stream_impressions(source, compressed: bool = False, strict: bool = True,
                       errors: list | None = None) -> Iterator[ImpressionRecord]:
    """Lazily yield impressions from a byte stream or path.

    In strict mode the first malformed impression raises ParseError.  Otherwise
    the impression is skipped, its ParseError is appended to ``errors`` (when
    given) and reading resumes at the next ``example`` header.
    """
    text = _open_text(source, compressed)
    index = 0
    pending: list = []
    start = 0

    def flush():
        nonlocal index
        rec = None
        try:
            rec = parse_impression(pending, start, impression=index)
        except ParseError as exc:
            if strict:
                raise
            if errors is not None:
                errors.append(exc)
        index += 1
        return rec

    try:
        for line_no, line in enumerate(text, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("example"):
                if pending:
                    rec = flush()
                    if rec is not None:
                        yield rec
                pending = [line]
                start = line_no
            elif pending:
                pending.append(line)
            else:
                exc = ParseError("candidate line before any header", line_no, "header", index)
                if strict:
                    raise exc
                if errors is not None:
                    errors.append(exc)
        if pending:
            rec = flush()
            if rec is not None:
                yield rec
    except (gzip.BadGzipFile, EOFError, UnicodeDecodeError) as exc:
        raise LogFormatError(f"cannot decode log stream: {exc}") from exc
    except OSError as exc:
        if "gzip" in str(exc).lower() or "compressed" in str(exc).lower():
            raise LogFormatError(f"cannot decode log stream: {exc}") from exc
        raise


def read_log(path, strict: bool = True, errors: list | None = None) -> list:
    compressed = str(path).endswith(".gz")
    with open(path, "rb") as fh:
        return list(stream_impressions(fh, compressed=compressed, strict=strict, errors=errors))


def write_impressions(records: Iterable[ImpressionRecord], out: IO[str]) -> int:
    n = 0
    for r in records:
        for line in serialize_impression(r):
            out.write(line)
            out.write("\n")
        n += 1
    return n


def open_log_for_writing(path) -> IO[str]:
    if str(path).endswith(".gz"):
        # mtime=0 keeps compressed output byte-identical across runs
        raw = gzip.GzipFile(filename="", fileobj=open(path, "wb"), mode="wb", mtime=0)
        return io.TextIOWrapper(raw, encoding="utf-8", newline="\n")
    return open(path, "w", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# validation report


@dataclass
class ValidationReport:
    n_records: int = 0
    slot_counts: dict = field(default_factory=dict)
    exid_violations: list = field(default_factory=list)
    record_violations: list = field(default_factory=list)
    min_propensity: float = math.nan
    max_propensity: float = math.nan
    mean_inverse_propensity: float = math.nan

    @property
    def violations(self) -> list:
        return [f"exID decreases at record {i}: {prev} -> {cur}"
                for i, prev, cur in self.exid_violations] + \
               [f"record {i}: {msg}" for i, msg in self.record_violations]

    @property
    def ok(self) -> bool:
        return not self.exid_violations and not self.record_violations


def validate_log(records: Iterable[ImpressionRecord]) -> ValidationReport:
    """Count impressions per slot count and collect invariant violations."""
    rep = ValidationReport()
    prev = None
    inv_sum = 0.0
    for i, r in enumerate(records):
        rep.n_records += 1
        rep.slot_counts[r.nb_slots] = rep.slot_counts.get(r.nb_slots, 0) + 1
        if prev is not None and r.ex_id < prev:
            rep.exid_violations.append((i, prev, r.ex_id))
        prev = r.ex_id
        try:
            check_record(r)
        except RecordError as exc:
            rep.record_violations.append((i, str(exc)))
            continue
        q = r.propensity
        rep.min_propensity = q if math.isnan(rep.min_propensity) else min(rep.min_propensity, q)
        rep.max_propensity = q if math.isnan(rep.max_propensity) else max(rep.max_propensity, q)
        inv_sum += 1.0 / q
    valid = rep.n_records - len(rep.record_violations)
    if valid:
        rep.mean_inverse_propensity = inv_sum / valid
    rep.slot_counts = dict(sorted(rep.slot_counts.items()))
    return rep
