"""
Synthetic multi-session conversational-memory benchmark.

Dialogues are streams of templated turns: fact turns ("entity attribute is value"),
overwrites of earlier facts and chit-chat distractors, numbered consecutively across
sessions. QA items ask for the current value of one entity attribute, with the
evidence turn and the ask point placed so that lags fill every lag bucket.
"""
from collections import Counter
from dataclasses import dataclass, field, asdict
import json
import logging
from pathlib import Path

import numpy as np
from dateutil import parser as date_parser
from dateutil.relativedelta import relativedelta

from config import (
    BENCH_DIALOGUES, BENCH_SESSIONS, BENCH_TURNS_PER_SESSION, BENCH_ENTITIES, BENCH_ATTRIBUTES,
    BENCH_DISTRACTOR_RATE, BENCH_OVERWRITE_RATE, BENCH_QUESTIONS_PER_BUCKET, CORPUS_SCHEMA_VERSION,
    SESSION_START_DATE, SESSION_SPACING_DAYS, LAG_BUCKET_EDGES, SPEAKERS, ENTITY_NAMES, ATTRIBUTES,
    ATTRIBUTE_VALUES, DISTRACTOR_TEMPLATES, DISTRACTOR_ADJECTIVES, FACT_TEMPLATE, QUESTION_TEMPLATE,
    PRETRAIN_SEQUENCES
)
from modules.tokenizer import normalize_text
from utils.calculations import LagCalculations
from utils.errors import ConfigError, ValidationError
from utils.hashing import digest_file

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 500


@dataclass
class Turn:
    speaker: str
    text: str


@dataclass
class Session:
    index: int
    turns: list = field(default_factory=list)


@dataclass
class QAItem:
    """A question about the dialogue; evidence / ask_after_turn / valid_until are global turn indices"""
    question: str
    answer: str
    evidence: list
    ask_after_turn: int
    valid_until: int
    qid: str = ""
    category: str = "single"

    @property
    def lag(self):
        return LagCalculations.evidence_lag(self.ask_after_turn, self.evidence)


@dataclass
class Dialogue:
    dialogue_id: str
    sessions: list
    qa: list
    seed: int = 0
    session_dates: list = field(default_factory=list)

    @property
    def n_turns(self):
        return sum(len(s.turns) for s in self.sessions)

    def turns(self):
        """(global index, session index, Turn) in conversation order"""
        g = 0
        for session in self.sessions:
            for turn in session.turns:
                yield g, session.index, turn
                g += 1

    def session_ends(self):
        """Global index of the last turn of each session, skipping empty sessions"""
        ends = {}
        g = -1
        for session in self.sessions:
            g += len(session.turns)
            if session.turns:
                ends[session.index] = g
        return ends

    def global_index(self, session, turn):
        if not 0 <= session < len(self.sessions) or not 0 <= turn < len(self.sessions[session].turns):
            raise IndexError(f"({session}, {turn}) is not a turn of dialogue {self.dialogue_id}")
        return sum(len(s.turns) for s in self.sessions[:session]) + turn

    def position(self, global_index):
        for session in self.sessions:
            if global_index < len(session.turns):
                return session.index, global_index
            global_index -= len(session.turns)
        raise IndexError(f"turn {global_index} is past the end of dialogue {self.dialogue_id}")

    def turn_text(self, global_index):
        s, t = self.position(global_index)
        return self.sessions[s].turns[t].text


@dataclass
class BenchConfig:
    n_dialogues: int = BENCH_DIALOGUES
    n_sessions: int = BENCH_SESSIONS
    turns_per_session: int = BENCH_TURNS_PER_SESSION
    n_entities: int = BENCH_ENTITIES
    n_attributes: int = BENCH_ATTRIBUTES
    lag_profile: list = field(default_factory=lambda: [BENCH_QUESTIONS_PER_BUCKET] * len(LAG_BUCKET_EDGES))
    distractor_rate: float = BENCH_DISTRACTOR_RATE
    overwrite_rate: float = BENCH_OVERWRITE_RATE
    seed: int = 0
    start_date: str = SESSION_START_DATE

    def __post_init__(self):
        if self.n_dialogues < 1 or self.n_sessions < 1 or self.turns_per_session < 1:
            raise ConfigError("n_dialogues, n_sessions and turns_per_session must be positive")
        if not 1 <= self.n_entities <= len(ENTITY_NAMES):
            raise ConfigError(f"n_entities must lie in [1, {len(ENTITY_NAMES)}]")
        if not 1 <= self.n_attributes <= len(ATTRIBUTES):
            raise ConfigError(f"n_attributes must lie in [1, {len(ATTRIBUTES)}]")
        if len(self.lag_profile) != len(LAG_BUCKET_EDGES) or any(c < 0 for c in self.lag_profile):
            raise ConfigError(f"lag_profile needs {len(LAG_BUCKET_EDGES)} non-negative counts")
        for name in ('distractor_rate', 'overwrite_rate'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @property
    def total_turns(self):
        return self.n_sessions * self.turns_per_session

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
# Fact partition
# ----------------------------------------------------------------------

def fact_values(entity_index, attribute_index, partition):
    """Values of one (entity, attribute) pair in the benchmark or pretraining partition"""
    parity = 0 if partition == "benchmark" else 1
    values = ATTRIBUTE_VALUES[ATTRIBUTES[attribute_index]]
    return [v for i, v in enumerate(values) if (entity_index + attribute_index + i) % 2 == parity]


def partition_of(entity, attribute, value):
    """'benchmark' or 'pretraining' for a named fact triple"""
    ei, ai = ENTITY_NAMES.index(entity), ATTRIBUTES.index(attribute)
    vi = ATTRIBUTE_VALUES[attribute].index(value)
    return "benchmark" if (ei + ai + vi) % 2 == 0 else "pretraining"


def fact_text(entity, attribute, value):
    return FACT_TEMPLATE.format(entity=entity, attribute=attribute, value=value)


def question_text(entity, attribute):
    return QUESTION_TEMPLATE.format(entity=entity, attribute=attribute)


def _distractor(rng):
    template = DISTRACTOR_TEMPLATES[int(rng.integers(len(DISTRACTOR_TEMPLATES)))]
    return template.format(adj=DISTRACTOR_ADJECTIVES[int(rng.integers(len(DISTRACTOR_ADJECTIVES)))])


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------

class _Timeline:
    """Planned fact statements and protected question intervals of one dialogue"""

    def __init__(self, n_turns):
        self.n_turns = n_turns
        self.facts = {}          # turn -> (pair, value)
        self.intervals = {}      # pair -> list of (evidence, ask_after)

    def free(self, turn):
        return 0 <= turn < self.n_turns and turn not in self.facts

    def stated_between(self, pair, lo, hi):
        """Whether pair is stated in the half-open turn range (lo, hi]"""
        return any(p == pair and lo < t <= hi for t, (p, _) in self.facts.items())

    def protected(self, pair, turn):
        return any(e < turn <= a for e, a in self.intervals.get(pair, []))

    def next_statement(self, pair, turn):
        later = [t for t, (p, _) in self.facts.items() if p == pair and t > turn]
        return min(later) if later else None


def max_achievable_lag(config):
    return config.total_turns - 1


def _check_profile(config):
    limit = max_achievable_lag(config)
    for edge, count in zip(LAG_BUCKET_EDGES, config.lag_profile):
        if count and edge > limit:
            raise ConfigError(
                f"lag profile asks for lags >= {edge} but {config.n_sessions} sessions x "
                f"{config.turns_per_session} turns allow a maximum lag of {limit}"
            )


def _place_question(rng, timeline, pairs, lo, hi):
    """Pick (pair, evidence turn, ask point) with lag in [lo, hi) that keeps all earlier plans valid"""
    n = timeline.n_turns
    top = min(hi, n) - 1
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        lag = int(rng.integers(lo, top + 1))
        ask = int(rng.integers(lag, n))
        evidence = ask - lag
        pair = pairs[int(rng.integers(len(pairs)))]
        if not timeline.free(evidence) or timeline.protected(pair, evidence):
            continue
        if timeline.stated_between(pair, evidence, ask):
            continue
        return pair, evidence, ask
    raise ConfigError(
        f"could not place a question with lag in [{lo}, {hi}) after {MAX_PLACEMENT_ATTEMPTS} attempts; "
        f"use more entities/attributes or fewer questions"
    )


def _place_overwrite(rng, timeline, pair, evidence, value):
    """Earlier statement of the same pair with a different value; returns its turn or None"""
    candidates = [t for t in range(evidence) if timeline.free(t) and not timeline.protected(pair, t)]
    if not candidates:
        return None
    ei, ai = pair
    others = [v for v in fact_values(ei, ai, "benchmark") if v != value]
    if not others:
        return None
    turn = candidates[int(rng.integers(len(candidates)))]
    timeline.facts[turn] = (pair, others[int(rng.integers(len(others)))])
    return turn


def generate_dialogue(config, index):
    rng = np.random.default_rng([config.seed, index])
    n = config.total_turns
    pairs = [(e, a) for e in range(config.n_entities) for a in range(config.n_attributes)]
    timeline = _Timeline(n)

    planned = []
    edges = LAG_BUCKET_EDGES + [np.iinfo(np.int64).max]
    for bucket, count in enumerate(config.lag_profile):
        for _ in range(count):
            pair, evidence, ask = _place_question(rng, timeline, pairs, edges[bucket], edges[bucket + 1])
            ei, ai = pair
            values = fact_values(ei, ai, "benchmark")
            value = values[int(rng.integers(len(values)))]
            timeline.facts[evidence] = (pair, value)
            overwritten = None
            if rng.random() < config.overwrite_rate:
                overwritten = _place_overwrite(rng, timeline, pair, evidence, value)
            timeline.intervals.setdefault(pair, []).append((evidence, ask))
            planned.append((pair, evidence, ask, value, overwritten))

    # Fill the remaining turns with distractors and unasked facts (which may overwrite later)
    speakers = [SPEAKERS[i] for i in rng.permutation(len(SPEAKERS))[:2]]
    texts = []
    for g in range(n):
        if g in timeline.facts:
            (ei, ai), value = timeline.facts[g]
            texts.append(fact_text(ENTITY_NAMES[ei], ATTRIBUTES[ai], value))
            continue
        if rng.random() >= config.distractor_rate:
            pair = pairs[int(rng.integers(len(pairs)))]
            if not timeline.protected(pair, g):
                ei, ai = pair
                values = fact_values(ei, ai, "benchmark")
                value = values[int(rng.integers(len(values)))]
                timeline.facts[g] = (pair, value)
                texts.append(fact_text(ENTITY_NAMES[ei], ATTRIBUTES[ai], value))
                continue
        texts.append(_distractor(rng))

    sessions = []
    for s in range(config.n_sessions):
        lo = s * config.turns_per_session
        turns = [Turn(speakers[(g - lo) % 2], texts[g]) for g in range(lo, lo + config.turns_per_session)]
        sessions.append(Session(s, turns))

    qa = []
    for j, (pair, evidence, ask, value, overwritten) in enumerate(planned):
        ei, ai = pair
        following = timeline.next_statement(pair, ask)
        qa.append(QAItem(
            question=question_text(ENTITY_NAMES[ei], ATTRIBUTES[ai]),
            answer=value,
            evidence=[evidence],
            ask_after_turn=ask,
            valid_until=(following - 1) if following is not None else n - 1,
            qid=f"d{index}_q{j}",
            category="overwritten" if overwritten is not None else "single",
        ))
    qa.sort(key=lambda q: (q.ask_after_turn, q.qid))

    start = date_parser.isoparse(config.start_date).date()
    dates = [start + relativedelta(days=SESSION_SPACING_DAYS * s) for s in range(config.n_sessions)]
    return Dialogue(f"d{index}", sessions, qa, seed=config.seed, session_dates=dates)


def generate(config):
    """Generate config.n_dialogues validated dialogues"""
    _check_profile(config)
    dialogues = []
    for i in range(config.n_dialogues):
        dialogue = generate_dialogue(config, i)
        validate_dialogue(dialogue, strict=True)
        dialogues.append(dialogue)
    logger.info(
        f"Generated {len(dialogues)} dialogues x {config.total_turns} turns, "
        f"{sum(len(d.qa) for d in dialogues)} questions (seed {config.seed})"
    )
    return dialogues


# ----------------------------------------------------------------------
# Validation
# ----------------------------------------------------------------------

def validate_dialogue(dialogue, strict=False):
    """
    Check evidence and ask points against the turn count. The literal-answer check
    raises in strict mode and only warns otherwise.
    """
    n = dialogue.n_turns
    for qa in dialogue.qa:
        if not qa.evidence:
            raise ValidationError(f"QA item {qa.qid!r} ({qa.question!r}) has no evidence")
        for e in qa.evidence:
            if not 0 <= e < n:
                raise ValidationError(
                    f"QA item {qa.qid!r} ({qa.question!r}) cites turn {e} but dialogue "
                    f"{dialogue.dialogue_id} has {n} turns"
                )
        if not max(qa.evidence) <= qa.ask_after_turn < n:
            raise ValidationError(
                f"QA item {qa.qid!r} is asked after turn {qa.ask_after_turn}, before its evidence "
                f"{max(qa.evidence)} or past the end ({n} turns)"
            )
        if qa.valid_until < qa.ask_after_turn:
            raise ValidationError(f"QA item {qa.qid!r} expires at turn {qa.valid_until} before it is asked")
        gold = normalize_text(qa.answer)
        if not any(f" {gold} " in f" {normalize_text(dialogue.turn_text(e))} " for e in qa.evidence):
            message = f"QA item {qa.qid!r}: answer {qa.answer!r} does not occur in its evidence turns"
            if strict:
                raise ValidationError(message)
            logger.warning(message)


def oov_report(dialogues, tokenizer):
    """Counter of words the tokenizer will map to the unknown token"""
    counts = Counter()
    for dialogue in dialogues:
        for _, _, turn in dialogue.turns():
            counts.update(tokenizer.oov_words(f"{turn.speaker} : {turn.text}"))
        for qa in dialogue.qa:
            counts.update(tokenizer.oov_words(qa.question))
            counts.update(tokenizer.oov_words(qa.answer))
    return counts


# ----------------------------------------------------------------------
# Export / ingest
# ----------------------------------------------------------------------

def _dialogue_to_dict(dialogue):
    return {
        'dialogue_id': dialogue.dialogue_id,
        'seed': dialogue.seed,
        'session_dates': [d.isoformat() for d in dialogue.session_dates],
        'sessions': [[{'speaker': t.speaker, 'text': t.text} for t in s.turns] for s in dialogue.sessions],
        'qa': [
            {
                'qid': qa.qid,
                'question': qa.question,
                'answer': qa.answer,
                'category': qa.category,
                'evidence': [list(dialogue.position(e)) for e in qa.evidence],
                'ask_after': list(dialogue.position(qa.ask_after_turn)),
                'valid_until': list(dialogue.position(qa.valid_until)),
            }
            for qa in dialogue.qa
        ],
    }


def corpus_bytes(dialogues, config=None):
    document = {
        'schema_version': CORPUS_SCHEMA_VERSION,
        'config': config.to_dict() if config is not None else None,
        'dialogues': [_dialogue_to_dict(d) for d in dialogues],
    }
    return (json.dumps(document, sort_keys=True, indent=1) + "\n").encode('utf-8')


def export(dialogues, path, config=None):
    """Write dialogues in the corpus schema; returns the file digest"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(corpus_bytes(dialogues, config))
        logger.info(f"Corpus with {len(dialogues)} dialogues written to {path}")
        return digest_file(path)
    except Exception as e:
        logger.error(f"Error exporting corpus to {path}: {e}")
        raise


def _parse_dates(raw, dialogue_id):
    dates = []
    for value in raw or []:
        try:
            dates.append(date_parser.parse(str(value), fuzzy=True).date())
        except (ValueError, OverflowError) as e:
            raise ValidationError(f"dialogue {dialogue_id}: unreadable session date {value!r}") from e
    return dates


def _pair(value, what, qid):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValidationError(f"QA item {qid!r}: {what} must be a [session, turn] pair, got {value!r}")
    return int(value[0]), int(value[1])


def _dialogue_from_dict(raw, index):
    if not isinstance(raw, dict) or 'sessions' not in raw or 'qa' not in raw:
        raise ValidationError(f"dialogue {index} needs 'sessions' and 'qa'")
    dialogue_id = str(raw.get('dialogue_id', f"d{index}"))
    sessions = []
    for s, turns in enumerate(raw['sessions']):
        try:
            sessions.append(Session(s, [Turn(str(t['speaker']), str(t['text'])) for t in turns]))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"dialogue {dialogue_id} session {s}: turns need speaker and text") from e
    dialogue = Dialogue(dialogue_id, sessions, [], seed=int(raw.get('seed', 0)),
                        session_dates=_parse_dates(raw.get('session_dates'), dialogue_id))
    n = dialogue.n_turns
    if n == 0:
        raise ValidationError(f"dialogue {dialogue_id} has no turns")

    for j, item in enumerate(raw['qa']):
        qid = str(item.get('qid', f"{dialogue_id}_q{j}"))
        if 'question' not in item or 'answer' not in item:
            raise ValidationError(f"QA item {qid!r} needs question and answer")
        evidence = []
        for ev in item.get('evidence', []):
            s, t = _pair(ev, 'evidence', qid)
            try:
                evidence.append(dialogue.global_index(s, t))
            except IndexError:
                raise ValidationError(
                    f"QA item {qid!r} ({item['question']!r}) has dangling evidence ({s}, {t})"
                ) from None
        if not evidence:
            raise ValidationError(f"QA item {qid!r} ({item['question']!r}) has no evidence")

        def resolve(key, default):
            if key not in item:
                return default
            s, t = _pair(item[key], key, qid)
            try:
                return dialogue.global_index(s, t)
            except IndexError:
                raise ValidationError(f"QA item {qid!r}: {key} ({s}, {t}) is not a turn") from None

        ask = resolve('ask_after', n - 1)
        dialogue.qa.append(QAItem(
            question=str(item['question']), answer=str(item['answer']), evidence=evidence,
            ask_after_turn=ask, valid_until=resolve('valid_until', n - 1), qid=qid,
            category=str(item.get('category', 'single')),
        ))
    return dialogue


def ingest(path, tokenizer=None):
    """Load and validate a corpus file; OOV words are counted and reported"""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Error reading corpus {path}: {e}")
        raise ValidationError(f"cannot read corpus {path}: {e}") from e

    if isinstance(document, list):
        logger.info(f"{path}: bare dialogue list read as schema_version 1")
        document = {'schema_version': 1, 'dialogues': document}
    if not isinstance(document, dict) or 'schema_version' not in document:
        raise ValidationError(f"{path}: corpus files need a top-level schema_version or a bare dialogue list")
    if document['schema_version'] != CORPUS_SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: schema_version {document['schema_version']} is not {CORPUS_SCHEMA_VERSION}"
        )
    if not isinstance(document.get('dialogues'), list):
        raise ValidationError(f"{path}: 'dialogues' must be a list")

    dialogues = [_dialogue_from_dict(raw, i) for i, raw in enumerate(document['dialogues'])]
    for dialogue in dialogues:
        validate_dialogue(dialogue)

    if tokenizer is not None:
        oov = oov_report(dialogues, tokenizer)
        if oov:
            top = ", ".join(f"{w} ({c})" for w, c in oov.most_common(10))
            logger.warning(f"{sum(oov.values())} out-of-vocabulary words mapped to the unknown token: {top}")
    logger.info(f"Ingested {len(dialogues)} dialogues from {path}")
    return dialogues


# ----------------------------------------------------------------------
# Pretraining corpus
# ----------------------------------------------------------------------

def pretraining_corpus(tokenizer, n_sequences=PRETRAIN_SEQUENCES, seed=0, n_entities=BENCH_ENTITIES,
                       n_attributes=BENCH_ATTRIBUTES):
    """
    Token sequences teaching the backbone to answer questions from facts stated earlier
    in the same sequence. Facts come from the pretraining partition only.
    """
    rng = np.random.default_rng([seed, 7919])
    pairs = [(e, a) for e in range(n_entities) for a in range(n_attributes)]
    sequences = []
    for _ in range(n_sequences):
        n_facts = int(rng.integers(2, 7))
        chosen = rng.choice(len(pairs), size=n_facts, replace=False)
        speakers = [SPEAKERS[i] for i in rng.permutation(len(SPEAKERS))[:2]]
        stated = []
        tokens = []
        for k, idx in enumerate(chosen):
            ei, ai = pairs[int(idx)]
            values = fact_values(ei, ai, "pretraining")
            value = values[int(rng.integers(len(values)))]
            stated.append((ei, ai, value))
            if rng.random() < 0.5:
                tokens += tokenizer.encode_turn(speakers[k % 2], _distractor(rng))
            tokens += tokenizer.encode_turn(speakers[(k + 1) % 2], fact_text(ENTITY_NAMES[ei], ATTRIBUTES[ai], value))
        for q in rng.choice(len(stated), size=min(2, len(stated)), replace=False):
            ei, ai, value = stated[int(q)]
            tokens += tokenizer.encode_question(question_text(ENTITY_NAMES[ei], ATTRIBUTES[ai]))
            tokens += tokenizer.encode_answer(value)
        sequences.append(tokens)
    return sequences


def benchmark_facts(dialogues):
    """Set of (entity, attribute, value) triples stated in the dialogues"""
    triples = set()
    for dialogue in dialogues:
        for _, _, turn in dialogue.turns():
            words = turn.text.split(" is ", 1)
            head = words[0].split()
            if len(words) == 2 and len(head) == 2 and head[0] in ENTITY_NAMES and head[1] in ATTRIBUTES:
                triples.add((head[0], head[1], words[1]))
    return triples
