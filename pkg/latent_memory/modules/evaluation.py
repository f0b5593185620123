"""
Forgetting-curve and knowledge-accumulation protocol.

For each question the with-memory handle, its ablated clone (zero state, same
architecture path) and the stateless baseline answer the same token sequence.
"""
from dataclasses import dataclass, field, asdict
import logging
import math

from tqdm import tqdm

from config import LAG_BUCKET_EDGES, MAX_ANSWER_TOKENS
from modules.runtime import ConversationHandle, ablate_memory
from utils.calculations import ScoreCalculations, LagCalculations, IsotonicCalculations
from utils.errors import ContractError, EmptyCurveError, EqualInputViolation

logger = logging.getLogger(__name__)


@dataclass
class QuestionResult:
    qid: str
    dialogue_id: str
    lag: int
    f1_mem: float
    f1_ablated: float
    f1_baseline: float
    retained: float
    session: int
    gold: str = ""
    pred_mem: str = ""
    pred_ablated: str = ""
    pred_baseline: str = ""
    input_digest: str = ""

    def to_dict(self):
        return asdict(self)


@dataclass
class KnowledgeResult:
    """A knowledge probe at the end of session s"""
    qid: str
    dialogue_id: str
    session: int
    f1_mem: float
    f1_baseline: float


@dataclass
class EvalCurve:
    edges: list
    raw: list
    smoothed: list
    counts: list
    k_series: list = field(default_factory=list)
    k_carried: list = field(default_factory=list)
    delta_k: float = 0.0

    @property
    def retained_min(self):
        """Minimum smoothed retained score across non-empty buckets"""
        values = [v for v, c in zip(self.smoothed, self.counts) if c]
        return min(values) if values else 0.0

    def bucket_rows(self):
        for i, (raw, smooth, count) in enumerate(zip(self.raw, self.smoothed, self.counts)):
            yield LagCalculations.bucket_label(i, self.edges), raw, smooth, count


def bucket_and_smooth(results, edges=LAG_BUCKET_EDGES):
    """Per-bucket mean retained score, then weighted non-increasing PAVA over non-empty buckets"""
    if not results:
        raise EmptyCurveError("no question results to bucket")
    sums = [0.0] * len(edges)
    counts = [0] * len(edges)
    for r in results:
        b = LagCalculations.bucket_index(r.lag, edges)
        sums[b] += r.retained
        counts[b] += 1
    raw = [s / c if c else None for s, c in zip(sums, counts)]
    filled = [i for i, c in enumerate(counts) if c]
    empty = [LagCalculations.bucket_label(i, edges) for i, c in enumerate(counts) if not c]
    if empty:
        logger.warning(f"empty lag buckets excluded from smoothing: {', '.join(empty)}")
    fitted = IsotonicCalculations.pava_non_increasing([raw[i] for i in filled], [counts[i] for i in filled])
    smoothed = [None] * len(edges)
    for i, v in zip(filled, fitted):
        smoothed[i] = v
    return EvalCurve(list(edges), raw, smoothed, counts)


def knowledge_curve(results, n_sessions):
    """
    K_s = 100 x (mean method F1 - mean baseline F1) over the probes of session s.
    Sessions without probes carry the previous value forward and are flagged.
    Returns (K series, carried flags, delta K).
    """
    by_session = {}
    for r in results:
        by_session.setdefault(r.session, []).append(r)
    series, carried = [], []
    previous = 0.0
    for s in range(n_sessions):
        group = by_session.get(s)
        if not group:
            series.append(previous)
            carried.append(True)
            continue
        mem = math.fsum(r.f1_mem for r in group) / len(group)
        base = math.fsum(r.f1_baseline for r in group) / len(group)
        previous = 100.0 * (mem - base)
        series.append(previous)
        carried.append(False)
    if any(carried):
        logger.warning(f"{sum(carried)} session(s) without knowledge probes carried forward")
    return series, carried, (series[-1] if series else 0.0)


@dataclass
class ProtocolResult:
    curve: EvalCurve
    questions: list
    knowledge: list
    summary: dict


class ProtocolRunner:
    """Drives Type-2 conversations over a corpus and scores three conditions per question"""

    def __init__(self, backbone, adapter, max_answer_tokens=MAX_ANSWER_TOKENS):
        self.backbone = backbone
        self.adapter = adapter
        self.max_answer_tokens = max_answer_tokens

    def _three_way(self, mem, ablated, baseline, question, cache):
        """
        Answers of the three conditions. Each handle encodes the question itself; the
        zero-state conditions never change, so their answers are cached by question text.
        """
        answers = [mem.answer(question, self.max_answer_tokens)]
        for name, handle in (('ablated', ablated), ('baseline', baseline)):
            if (name, question) not in cache:
                cache[(name, question)] = handle.answer(question, self.max_answer_tokens)
            answers.append(cache[(name, question)])
        expected = answers[0].input_digest
        if any(a.input_digest != expected for a in answers):
            raise EqualInputViolation(
                f"conditions received different inputs for {question!r}: "
                f"{[a.input_digest[:12] for a in answers]}"
            )
        return answers, expected

    def run_dialogue(self, dialogue):
        """(question results, knowledge results) for one dialogue"""
        mem = ConversationHandle(self.backbone, self.adapter)
        ablated = ablate_memory(mem)
        baseline = ConversationHandle(self.backbone)
        asked = {}
        for qa in dialogue.qa:
            asked.setdefault(qa.ask_after_turn, []).append(qa)
        session_of_end = {g: s for s, g in dialogue.session_ends().items()}

        cache = {}
        questions, knowledge = [], []
        for g, session, turn in dialogue.turns():
            mem.say(turn.speaker, turn.text)
            for qa in asked.get(g, []):
                (a_mem, a_abl, a_base), digest = self._three_way(mem, ablated, baseline, qa.question, cache)
                f1_mem = ScoreCalculations.token_f1(a_mem.text, qa.answer)
                f1_abl = ScoreCalculations.token_f1(a_abl.text, qa.answer)
                questions.append(QuestionResult(
                    qid=qa.qid, dialogue_id=dialogue.dialogue_id, lag=qa.lag,
                    f1_mem=f1_mem, f1_ablated=f1_abl,
                    f1_baseline=ScoreCalculations.token_f1(a_base.text, qa.answer),
                    retained=ScoreCalculations.retained_score(f1_mem, f1_abl), session=session,
                    gold=qa.answer, pred_mem=a_mem.text, pred_ablated=a_abl.text, pred_baseline=a_base.text,
                    input_digest=digest,
                ))
            if g in session_of_end:
                for qa in dialogue.qa:
                    if max(qa.evidence) <= g <= qa.valid_until:
                        (a_mem, _, a_base), _ = self._three_way(mem, ablated, baseline, qa.question, cache)
                        knowledge.append(KnowledgeResult(
                            qid=qa.qid, dialogue_id=dialogue.dialogue_id, session=session,
                            f1_mem=ScoreCalculations.token_f1(a_mem.text, qa.answer),
                            f1_baseline=ScoreCalculations.token_f1(a_base.text, qa.answer),
                        ))
        if mem.state is not None and mem.state.turn != dialogue.n_turns:
            raise ContractError(f"memory saw {mem.state.turn} turns of {dialogue.n_turns}")
        return questions, knowledge

    def run_protocol(self, dialogues):
        if not dialogues:
            raise EmptyCurveError("no dialogues to evaluate")
        questions, knowledge = [], []
        label = self.adapter.method.label if self.adapter is not None else "M.0"
        for dialogue in tqdm(dialogues, desc=f"eval {label}", disable=None):
            q, k = self.run_dialogue(dialogue)
            questions.extend(q)
            knowledge.extend(k)
        curve = bucket_and_smooth(questions)
        n_sessions = max(len(d.sessions) for d in dialogues)
        curve.k_series, curve.k_carried, curve.delta_k = knowledge_curve(knowledge, n_sessions)
        summary = summarize(curve, questions, knowledge)
        logger.info(f"{label}: retained {summary['retained_pct']:.2f}%, delta K {summary['delta_k']:.2f}")
        return ProtocolResult(curve, questions, knowledge, summary)


def summarize(curve, questions, knowledge):
    n = len(questions)
    return {
        'retained_pct': 100.0 * curve.retained_min,
        'delta_k': curve.delta_k,
        'questions': n,
        'knowledge_probes': len(knowledge),
        'mean_f1_mem': math.fsum(q.f1_mem for q in questions) / n,
        'mean_f1_ablated': math.fsum(q.f1_ablated for q in questions) / n,
        'mean_f1_baseline': math.fsum(q.f1_baseline for q in questions) / n,
        'bucket_counts': list(curve.counts),
    }


def run_protocol(backbone, adapter, dialogues, max_answer_tokens=MAX_ANSWER_TOKENS):
    return ProtocolRunner(backbone, adapter, max_answer_tokens).run_protocol(dialogues)
