"""Rule-based normalization of temporal expressions to closed UTC ranges.

Every resolved range runs from the first second of its first day to the last
second (``23:59:59``) of its last day. Weeks run Monday to Sunday. Rules are
tried from most to least specific and the first match wins.
"""

from __future__ import annotations

import calendar
import re
from datetime import date, datetime, time, timedelta
from typing import Callable

from .errors import TemporalParseError
from .model import UTC, as_utc
from .providers import TemporalFallback

Range = tuple[datetime, datetime]

_MONTHS = {name.lower(): i for i, name in enumerate(calendar.month_name) if name}
_MONTH_ABBR = {name.lower(): i for i, name in enumerate(calendar.month_abbr) if name}
_MONTH_ABBR["sept"] = 9
_WEEKDAYS = {name.lower(): i for i, name in enumerate(calendar.day_name)}
_NUMBER_WORDS = {
    "a": 1, "an": 1, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12,
}

_MONTH_FULL = "|".join(_MONTHS)
_MONTH_ANY = "|".join(sorted([*_MONTHS, *_MONTH_ABBR], key=len, reverse=True))
_NUM = r"(\d+|" + "|".join(_NUMBER_WORDS) + r")"
_UNIT = r"(day|week|month|year)s?"

# A single calendar date or month written out; used alone and inside ranges.
_DATE_TOKEN = (
    r"(?:\d{4}-\d{2}-\d{2}"
    rf"|(?:{_MONTH_ANY})\.?\s+\d{{1,2}}(?:st|nd|rd|th)?,?\s+\d{{4}}"
    rf"|\d{{1,2}}(?:st|nd|rd|th)?\s+(?:of\s+)?(?:{_MONTH_ANY})\.?,?\s+\d{{4}}"
    rf"|(?:{_MONTH_ANY})\.?,?\s+\d{{4}})"
)


def day_range(start: date, end: date | None = None) -> Range:
    """Closed range covering whole days ``start`` through ``end`` inclusive."""
    end = end or start
    return (
        datetime.combine(start, time(0, 0, 0), tzinfo=UTC),
        datetime.combine(end, time(23, 59, 59), tzinfo=UTC),
    )


def _month_range(year: int, month: int) -> Range:
    last = calendar.monthrange(year, month)[1]
    return day_range(date(year, month, 1), date(year, month, last))


def _shift_month(year: int, month: int, delta: int) -> tuple[int, int]:
    idx = year * 12 + (month - 1) + delta
    return idx // 12, idx % 12 + 1


def _week_start(d: date) -> date:
    return d - timedelta(days=d.weekday())


def _number(token: str) -> int:
    return int(token) if token.isdigit() else _NUMBER_WORDS[token]


def _month_num(token: str) -> int:
    token = token.lower().rstrip(".")
    return _MONTHS.get(token) or _MONTH_ABBR[token]


def _parse_date_token(token: str) -> Range:
    token = token.strip().lower()
    try:
        m = re.fullmatch(r"(\d{4})-(\d{2})-(\d{2})", token)
        if m:
            return day_range(date(int(m[1]), int(m[2]), int(m[3])))
        m = re.fullmatch(rf"({_MONTH_ANY})\.?\s+(\d{{1,2}})(?:st|nd|rd|th)?,?\s+(\d{{4}})", token)
        if m:
            return day_range(date(int(m[3]), _month_num(m[1]), int(m[2])))
        m = re.fullmatch(rf"(\d{{1,2}})(?:st|nd|rd|th)?\s+(?:of\s+)?({_MONTH_ANY})\.?,?\s+(\d{{4}})", token)
        if m:
            return day_range(date(int(m[3]), _month_num(m[2]), int(m[1])))
        m = re.fullmatch(rf"({_MONTH_ANY})\.?,?\s+(\d{{4}})", token)
        if m:
            return _month_range(int(m[2]), _month_num(m[1]))
    except ValueError as exc:
        raise TemporalParseError(f"invalid calendar date {token!r}") from exc
    raise TemporalParseError(f"unrecognized date {token!r}")


# Each rule receives the regex match and "today" and returns a range.
_Rule = tuple[re.Pattern[str], Callable[[re.Match[str], date], Range]]


def _between(m: re.Match[str], today: date) -> Range:
    first, second = _parse_date_token(m[1]), _parse_date_token(m[2])
    return first[0], second[1]


def _ago(m: re.Match[str], today: date) -> Range:
    n, unit = _number(m[1]), m[2]
    if unit == "day":
        return day_range(today - timedelta(days=n))
    if unit == "week":
        start = _week_start(today - timedelta(weeks=n))
        return day_range(start, start + timedelta(days=6))
    if unit == "month":
        return _month_range(*_shift_month(today.year, today.month, -n))
    return day_range(date(today.year - n, 1, 1), date(today.year - n, 12, 31))


def _trailing(m: re.Match[str], today: date) -> Range:
    n, unit = _number(m[1]), m[2]
    if unit == "day":
        return day_range(today - timedelta(days=n), today)
    if unit == "week":
        return day_range(today - timedelta(weeks=n), today)
    if unit == "month":
        y, mo = _shift_month(today.year, today.month, -n)
        last = calendar.monthrange(y, mo)[1]
        return day_range(date(y, mo, min(today.day, last)), today)
    return day_range(date(today.year - n, today.month, min(today.day, 28)), today)


def _relative_day(m: re.Match[str], today: date) -> Range:
    offset = {"yesterday": -1, "today": 0, "tonight": 0, "tomorrow": 1}[m[1]]
    return day_range(today + timedelta(days=offset))


def _weekend(m: re.Match[str], today: date) -> Range:
    saturday = _week_start(today) + timedelta(days=5)
    if m[1] == "last":
        saturday -= timedelta(weeks=1)
    return day_range(saturday, saturday + timedelta(days=1))


def _relative_period(m: re.Match[str], today: date) -> Range:
    offset = {"last": -1, "previous": -1, "past": -1, "this": 0, "current": 0, "next": 1}[m[1]]
    unit = m[2]
    if unit == "week":
        start = _week_start(today) + timedelta(weeks=offset)
        return day_range(start, start + timedelta(days=6))
    if unit == "month":
        return _month_range(*_shift_month(today.year, today.month, offset))
    year = today.year + offset
    return day_range(date(year, 1, 1), date(year, 12, 31))


def _weekday(m: re.Match[str], today: date) -> Range:
    target = _WEEKDAYS[m[2]]
    back = (today.weekday() - target) % 7
    if m[1] == "last" and back == 0:
        back = 7
    return day_range(today - timedelta(days=back))


def _single_date(m: re.Match[str], today: date) -> Range:
    return _parse_date_token(m[1])


def _bare_month(m: re.Match[str], today: date) -> Range:
    month = _MONTHS[m[1]]
    year = today.year if month <= today.month else today.year - 1
    return _month_range(year, month)


def _bare_year(m: re.Match[str], today: date) -> Range:
    year = int(m[1])
    return day_range(date(year, 1, 1), date(year, 12, 31))


_RULES: list[_Rule] = [
    (re.compile(rf"\b(?:between|from)\s+({_DATE_TOKEN})\s+(?:and|to|until|through)\s+({_DATE_TOKEN})"), _between),
    (re.compile(rf"\b{_NUM}\s+{_UNIT}\s+ago\b"), _ago),
    (re.compile(rf"\b(?:last|past|previous)\s+{_NUM}\s+{_UNIT}\b"), _trailing),
    (re.compile(r"\b(yesterday|today|tonight|tomorrow)\b"), _relative_day),
    (re.compile(r"\b(last|this)\s+weekend\b"), _weekend),
    (re.compile(r"\b(last|previous|past|this|current|next)\s+(week|month|year)\b"), _relative_period),
    (re.compile(rf"\b(last|on|this)\s+({'|'.join(_WEEKDAYS)})\b"), _weekday),
    (re.compile(rf"\b({_DATE_TOKEN})\b"), _single_date),
    (re.compile(rf"\b(?:in|during|since|of|throughout)\s+({_MONTH_FULL})\b"), _bare_month),
    (re.compile(r"\b(?:in|during|since|of|throughout)\s+((?:19|20)\d{2})\b"), _bare_year),
]


def parse_temporal(
    query_text: str,
    now: datetime,
    fallback: TemporalFallback | None = None,
) -> Range | None:
    """Resolve the first temporal expression in ``query_text`` to a closed range.

    Args:
        query_text: free text, e.g. ``"what did I do last weekend?"``.
        now: reference instant for relative expressions.
        fallback: optional provider consulted when no rule matches.

    Returns:
        ``(start, end)`` in UTC, or None when the text has no temporal
        expression.

    Raises:
        TemporalParseError: if the expression resolves to an inverted range
            or names an impossible calendar date.
    """
    today = as_utc(now).date()
    lowered = query_text.lower()
    for pattern, handler in _RULES:
        m = pattern.search(lowered)
        if m is None:
            continue
        # "may" is also a verb; only treat it as a month when capitalized.
        if handler is _bare_month and m[1] == "may" and "May" not in query_text[m.start(1) : m.end(1) + 1]:
            continue
        start, end = handler(m, today)
        return _checked(start, end, query_text)
    if fallback is not None:
        resolved = fallback.resolve(query_text, as_utc(now))
        if resolved is not None:
            return _checked(as_utc(resolved[0]), as_utc(resolved[1]), query_text)
    return None


def _checked(start: datetime, end: datetime, text: str) -> Range:
    if start > end:
        raise TemporalParseError(
            f"temporal expression resolves to an inverted range in {text!r}",
            [f"{start.isoformat()} > {end.isoformat()}"],
        )
    return start, end
